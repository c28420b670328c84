import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import binary_entropy, scalar_frechet
from udmlab.analysis import (
    PROBE_CSV_COLUMNS,
    RandomProjectionFeatures,
    field_entropy,
    frechet_feature_distance,
    frechet_from_moments,
    token_marginal_tv,
    trajectory_probe,
)
from udmlab.core import LinearSchedule, TimeGrid
from udmlab.denoiser import Arch, zero_params
from udmlab.errors import ShapeError, StatisticsError
from udmlab.rng import stream


def test_field_entropy_examples():
    assert field_entropy(np.full((3, 4), 0.25)) == pytest.approx(math.log(4), abs=1e-12)
    assert field_entropy(np.eye(4)) == 0.0
    assert field_entropy(np.array([[0.75, 0.25]])) == pytest.approx(0.562335, abs=1e-6)
    assert field_entropy(np.array([[0.75, 0.25]])) == pytest.approx(binary_entropy(0.75), abs=1e-15)


def test_tv_examples():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 5, size=(100, 4))
    assert token_marginal_tv(a, a) == 0.0
    assert token_marginal_tv(np.zeros((10, 3), int), np.ones((7, 3), int)) == 1.0
    x = (rng.random((20_000, 2)) < 0.2).astype(int)
    y = (rng.random((20_000, 2)) < 0.5).astype(int)
    assert token_marginal_tv(x, y, 2) == pytest.approx(0.3, abs=0.015)


def test_tv_errors():
    with pytest.raises(StatisticsError):
        token_marginal_tv(np.zeros((0, 3), int), np.zeros((2, 3), int))
    with pytest.raises(ShapeError):
        token_marginal_tv(np.zeros((2, 3), int), np.zeros((2, 4), int))


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_tv_bounded_and_symmetric(seed, K):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, K, size=(20, 3)), rng.integers(0, K, size=(30, 3))
    v = token_marginal_tv(a, b, K)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(token_marginal_tv(b, a, K), abs=1e-15)


def test_frechet_identical_sets_zero():
    a = np.random.default_rng(0).standard_normal((500, 4))
    assert abs(frechet_feature_distance(a, a)) <= 1e-9


def test_frechet_scalar_formula():
    a = np.array([0.0, 2.0, 4.0])
    b = np.array([10.0, 11.0, 12.0])
    sd_a, sd_b = np.std(a, ddof=1), np.std(b, ddof=1)
    expected = scalar_frechet(a.mean(), sd_a, b.mean(), sd_b)
    assert frechet_feature_distance(a, b) == pytest.approx(expected, abs=1e-12)


def test_frechet_matches_scipy_sqrtm():
    rng = np.random.default_rng(1)
    ma, mb = rng.standard_normal((6, 6)), rng.standard_normal((6, 6))
    sa, sb = ma @ ma.T + 0.1 * np.eye(6), mb @ mb.T + 0.1 * np.eye(6)
    mu_a, mu_b = rng.standard_normal(6), rng.standard_normal(6)
    cross = np.real(np.trace(scipy.linalg.sqrtm(sa @ sb)))
    expected = np.sum((mu_a - mu_b) ** 2) + np.trace(sa) + np.trace(sb) - 2 * cross
    assert frechet_from_moments(mu_a, sa, mu_b, sb) == pytest.approx(expected, rel=1e-9)


def test_frechet_singular_covariance_clamped():
    # rank-deficient covariances produce tiny negative eigenvalues that must not become NaN
    cov = np.outer([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    val = frechet_from_moments(np.zeros(3), cov, np.zeros(3), cov)
    assert np.isfinite(val) and abs(val) < 1e-6


def test_frechet_shift_monotone():
    rng = np.random.default_rng(2)
    base = rng.standard_normal((2000, 3))
    same = frechet_feature_distance(base[:1000], base[1000:])
    shifted = frechet_feature_distance(base[:1000], base[1000:] + 3.0)
    assert same < shifted


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_frechet_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((40, 3)), 2 * rng.standard_normal((50, 3)) + 1
    assert frechet_feature_distance(a, b) == pytest.approx(frechet_feature_distance(b, a), rel=1e-9, abs=1e-12)


def test_frechet_needs_two_samples():
    with pytest.raises(StatisticsError):
        frechet_feature_distance(np.zeros((1, 2)), np.zeros((5, 2)))


def test_random_projection_features():
    feats = RandomProjectionFeatures(5, 4, dim=8, seed=3)
    x = np.array([[0, 1, 2, 3], [4, 4, 4, 4]])
    out = feats(x)
    assert out.shape == (2, 8)
    onehot = np.eye(5)[x].reshape(2, -1)
    np.testing.assert_allclose(out, onehot @ feats.weights.reshape(20, 8), atol=1e-14)
    np.testing.assert_array_equal(RandomProjectionFeatures(5, 4, 8, 3).weights, feats.weights)


# -- probe ----------------------------------------------------------------------

def test_probe_rejects_too_few_pairs(small_pretrained, small_task):
    params, _ = small_pretrained
    for n in (0, 63):
        with pytest.raises(StatisticsError):
            trajectory_probe(params, small_task, TimeGrid.uniform(10), LinearSchedule(), n, stream(0, "p"))


@pytest.fixture(scope="module")
def probe(small_pretrained, small_task):
    params, _ = small_pretrained
    return trajectory_probe(params, small_task, TimeGrid.uniform(10), LinearSchedule(), 256, stream(0, "probe"))


def test_probe_table_layout(probe):
    assert len(probe.rows) == 11
    assert set(PROBE_CSV_COLUMNS) <= set(probe.rows[0])
    np.testing.assert_allclose(probe.column("t"), np.linspace(0, 1, 11), atol=1e-15)
    assert [r["t"] for r in probe.first_half()] == pytest.approx([0.0, 0.1, 0.2, 0.3, 0.4])
    assert probe.warning is None


def test_probe_entropy_falls_along_backward_trajectory(probe):
    ent = probe.column("entropy_backward")
    assert ent[0] >= ent[-1]
    assert probe.entropy_spearman() <= -0.8


def test_probe_final_knot_at_noise_level(probe):
    last = probe.rows[-1]
    # forward and backward states coincide with the clean sample at t = 1
    assert last["frechet_fwd"] == pytest.approx(last["frechet_bwd"], rel=0.5, abs=0.05)
    assert last["frechet_fwd"] < 5 * last["frechet_self"] + 0.05


def test_probe_deterministic(small_pretrained, small_task):
    params, _ = small_pretrained
    args = (params, small_task, TimeGrid.uniform(6), LinearSchedule(), 64)
    a = trajectory_probe(*args, stream(1, "probe"))
    b = trajectory_probe(*args, stream(1, "probe"))
    assert a.rows == b.rows


def test_probe_flags_untrained_model(small_task):
    params = zero_params(Arch(8, 8, 2))
    result = trajectory_probe(params, small_task, TimeGrid.uniform(4), LinearSchedule(), 64, stream(0, "p"))
    assert result.warning is not None
    assert len(result.rows) == 5

import io

import numpy as np
import pytest

from udmlab.core import LinearSchedule, TimeGrid, forward_corrupt, log_softmax
from udmlab.denoiser import AdamState, Arch, LossBatch, LossSpec, adamw_step, init_params, loss_and_grad, policy_logits
from udmlab.errors import DomainError
from udmlab.rng import stream
from udmlab.rollout import (
    CfgSpec,
    build_pretrain_trajectory,
    dump_trajectory,
    reconstruct_forward_state,
    sample_rollout,
    sample_rollouts,
)


def rngs(n, seed=0):
    return [stream(seed, "test", i) for i in range(n)]


@pytest.fixture(scope="module")
def memorized():
    """A model trained to predict one fixed x1 from any noisy state."""
    arch = Arch(5, 6, 1, embed_dim=16, hidden_dim=16)
    x1 = np.array([4, 0, 2, 2, 1, 3])
    rng = np.random.default_rng(0)
    params = init_params(arch, rng)
    state = AdamState.zeros(arch.num_params)
    for _ in range(300):
        t = rng.random(32)
        x_t = forward_corrupt(np.tile(x1, (32, 1)), t, LinearSchedule(), rng, 5)
        batch = LossBatch(x_t, t, np.zeros(32, dtype=np.int64), np.tile(x1, (32, 1)), np.full(32, 1 / 32))
        _, grad = loss_and_grad(params, batch, LossSpec())
        params, state = adamw_step(params, grad, state, lr=2e-2)
    return params, x1


def test_cfg_spec_validation():
    assert CfgSpec().guidance is None
    assert CfgSpec(True, 2.0).guidance == 2.0
    with pytest.raises(DomainError):
        CfgSpec(True, -1.0)
    with pytest.raises(DomainError):
        CfgSpec(True, float("inf"))


def test_one_step_grid_commits(tiny_params):
    rec = sample_rollout(tiny_params, 0, TimeGrid.uniform(1), CfgSpec(), stream(0, "r"))
    np.testing.assert_array_equal(rec.clean, rec.intermediate_preds[0])
    np.testing.assert_array_equal(rec.states[1], rec.clean)


def test_record_shapes_and_invariants(tiny_params):
    grid = TimeGrid.uniform(7)
    rec = sample_rollout(tiny_params, 1, grid, CfgSpec(), stream(1, "r"))
    assert rec.states.shape == (8, 3) and rec.intermediate_preds.shape == (7, 3)
    np.testing.assert_array_equal(rec.clean, rec.intermediate_preds[-1])
    np.testing.assert_array_equal(rec.states[-1], rec.clean)
    assert rec.old_logprob_clean[-1] == rec.old_logprob_intermediate[-1]
    assert rec.reward is None and rec.advantage is None
    assert rec.with_reward(0.5).reward == 0.5


def test_recorded_logprobs_match_recomputation(tiny_params):
    grid = TimeGrid.uniform(5)
    for cfg in (CfgSpec(), CfgSpec(True, 2.5)):
        rec = sample_rollout(tiny_params, 0, grid, cfg, stream(2, "r"))
        for j in range(5):
            logp = log_softmax(policy_logits(tiny_params, rec.states[j], grid.t(j), 0, cfg.guidance)[0])
            inter = np.take_along_axis(logp, rec.intermediate_preds[j][:, None], 1).sum()
            clean = np.take_along_axis(logp, rec.clean[:, None], 1).sum()
            assert rec.old_logprob_intermediate[j] == pytest.approx(inter, abs=1e-12)
            assert rec.old_logprob_clean[j] == pytest.approx(clean, abs=1e-12)


def test_model_evaluation_counter(tiny_params):
    grid = TimeGrid.uniform(6)
    assert sample_rollout(tiny_params, 0, grid, CfgSpec(), stream(0, "r")).n_model_evals == 6
    assert sample_rollout(tiny_params, 0, grid, CfgSpec(True, 2.0), stream(0, "r")).n_model_evals == 12


def test_rollouts_deterministic_and_batch_invariant(tiny_params):
    grid = TimeGrid.uniform(4)
    prompts = [0, 1, 0, 1, 1]
    together = sample_rollouts(tiny_params, prompts, grid, CfgSpec(), rngs(5))
    threaded = sample_rollouts(tiny_params, prompts, grid, CfgSpec(), rngs(5), workers=3)
    alone = [sample_rollout(tiny_params, c, grid, CfgSpec(), r) for c, r in zip(prompts, rngs(5))]
    for a, b, c in zip(together, threaded, alone):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.states, c.states)
        np.testing.assert_allclose(a.old_logprob_clean, c.old_logprob_clean, rtol=1e-13)


def test_rollout_generator_count_mismatch(tiny_params):
    with pytest.raises(DomainError):
        sample_rollouts(tiny_params, [0, 1], TimeGrid.uniform(2), CfgSpec(), rngs(1))


def test_initial_states_are_uniform():
    arch = Arch(4, 2, 1, embed_dim=4, hidden_dim=4)
    params = init_params(arch, np.random.default_rng(0))
    recs = sample_rollouts(params, [0] * 20_000, TimeGrid.uniform(1), CfgSpec(), rngs(20_000, seed=3))
    s0 = np.stack([r.states[0] for r in recs])
    for l in range(2):
        np.testing.assert_allclose(np.bincount(s0[:, l], minlength=4) / 20_000, 0.25, atol=0.01)


def test_memorized_model_reproduces_target(memorized):
    params, x1 = memorized
    recs = sample_rollouts(params, [0] * 1000, TimeGrid.uniform(10), CfgSpec(), rngs(1000, seed=4))
    hits = np.mean([np.array_equal(r.clean, x1) for r in recs])
    assert hits >= 0.99


def test_reconstruct_forward_state():
    clean = np.array([2, 0, 1])
    s = LinearSchedule()
    np.testing.assert_array_equal(reconstruct_forward_state(clean, 1.0, s, np.random.default_rng(0), 3), clean)
    many = reconstruct_forward_state(np.ones((20_000, 1), dtype=np.int64), 0.5, s, np.random.default_rng(1), 3)
    assert abs((many == 1).mean() - 2 / 3) < 0.01
    noise = reconstruct_forward_state(np.ones((20_000, 1), dtype=np.int64), 0.0, s, np.random.default_rng(1), 3)
    np.testing.assert_allclose(np.bincount(noise.ravel(), minlength=3) / 20_000, 1 / 3, atol=0.01)


def test_pretrain_trajectory_keep_rates():
    K, grid, s = 4, TimeGrid.uniform(4), LinearSchedule()
    x1 = np.array([3, 1])
    rng = np.random.default_rng(2)
    trajs = np.stack([build_pretrain_trajectory(x1, grid, s, rng, K) for _ in range(20_000)])
    assert trajs.shape == (20_000, 5, 2)
    np.testing.assert_array_equal(trajs[:, -1], np.broadcast_to(x1, (20_000, 2)))
    for j, t in enumerate(grid.knots):
        assert np.all(np.abs((trajs[:, j] == x1).mean(axis=0) - (t + (1 - t) / K)) < 0.01)


def test_dump_trajectory_format(tiny_params):
    rec = sample_rollout(tiny_params, 0, TimeGrid.uniform(2), CfgSpec(), stream(0, "r"))
    buf = io.StringIO()
    dump_trajectory(rec, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "#step\tt\tstate\tprediction"
    assert len(lines) == 4
    step, t, state, pred = lines[1].split("\t")
    assert (step, t) == ("0", "0.0")
    assert state == " ".join(map(str, rec.states[0]))
    assert pred == " ".join(map(str, rec.intermediate_preds[0]))
    assert lines[-1].endswith("\t-")

"""Diagnostics: prediction entropy along trajectories and divergence between trajectory families.

The Fréchet proxy keeps the Gaussian-moment distance used by FID but swaps
the Inception network for a fixed random projection of one-hot sequences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .core import NoiseSchedule, TimeGrid, entropy_rows, sample_categorical, softmax
from .denoiser import ModelParams, policy_logits
from .errors import ShapeError, StatisticsError
from .rollout import CfgSpec, build_pretrain_trajectory, reconstruct_forward_state, sample_rollouts
from .tasks import SyntheticTask, sample_clean

PROBE_CSV_COLUMNS = ("knot", "t", "entropy_backward", "frechet_fwd", "frechet_bwd", "tv_fwd", "tv_bwd")
MIN_PROBE_PAIRS = 64


def field_entropy(field: np.ndarray) -> float:
    """Mean over positions of the row entropy (nats)."""
    return float(np.mean(entropy_rows(np.asarray(field, dtype=np.float64))))


def token_marginal_tv(samples_a, samples_b, vocab_size: int | None = None) -> float:
    """Position-averaged total variation between empirical per-position token histograms."""
    a = np.asarray(samples_a, dtype=np.int64)
    b = np.asarray(samples_b, dtype=np.int64)
    if a.size == 0 or b.size == 0 or a.ndim != 2 or b.ndim != 2:
        raise StatisticsError("token_marginal_tv needs two non-empty (N, D) sample sets")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"sequence lengths differ: {a.shape[1]} vs {b.shape[1]}")
    K = vocab_size or int(max(a.max(), b.max()) + 1)
    D = a.shape[1]
    ha = np.zeros((D, K))
    hb = np.zeros((D, K))
    np.add.at(ha, (np.broadcast_to(np.arange(D), a.shape), a), 1.0)
    np.add.at(hb, (np.broadcast_to(np.arange(D), b.shape), b), 1.0)
    ha /= a.shape[0]
    hb /= b.shape[0]
    return float(0.5 * np.abs(ha - hb).sum(axis=1).mean())


class RandomProjectionFeatures:
    """One-hot encode a (D, K) sequence and project it to ``dim`` dimensions with a seeded map."""

    def __init__(self, vocab_size: int, seq_len: int, dim: int = 8, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.weights = rng.standard_normal((seq_len, vocab_size, dim)) / np.sqrt(seq_len)

    def __call__(self, samples) -> np.ndarray:
        x = np.asarray(samples, dtype=np.int64)
        D = self.weights.shape[0]
        return self.weights[np.arange(D)[None, :], x].sum(axis=1)


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The cross term uses Tr((S_a S_b)^{1/2}) = Tr((A S_b A)^{1/2}) with
    A = S_a^{1/2}; both roots come from symmetric eigendecompositions with
    negative eigenvalues clamped to zero.
    """
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    root_a = _sqrtm_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)


def frechet_feature_distance(samples_a, samples_b, feature_map: Callable | None = None) -> float:
    """Fréchet distance between Gaussian fits of the two feature sets.

    ``feature_map`` turns samples into an (N, d) float array; ``None`` means
    the samples already are features (1-D input is treated as d = 1).
    """
    fa = np.asarray(feature_map(samples_a) if feature_map else samples_a, dtype=np.float64)
    fb = np.asarray(feature_map(samples_b) if feature_map else samples_b, dtype=np.float64)
    fa = fa.reshape(len(fa), -1)
    fb = fb.reshape(len(fb), -1)
    if len(fa) < 2 or len(fb) < 2:
        raise StatisticsError("frechet_feature_distance needs at least two samples per set")
    return frechet_from_moments(fa.mean(axis=0), np.cov(fa, rowvar=False),
                                fb.mean(axis=0), np.cov(fb, rowvar=False))


@dataclass
class ProbeResult:
    rows: list[dict]
    warning: str | None = None
    extras: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def first_half(self) -> list[dict]:
        """Rows with t < 0.5: the high-noise half of the trajectory."""
        return [r for r in self.rows if r["t"] < 0.5]

    def entropy_spearman(self) -> float:
        """Rank correlation between t and backward-trajectory entropy."""
        return float(stats.spearmanr(self.column("t"), self.column("entropy_backward")).statistic)


def _predict(params, states, t, prompts, cfg, rng):
    probs = softmax(policy_logits(params, states, t, prompts, cfg.guidance))
    preds = sample_categorical(probs, rng.random(states.shape))
    return probs, preds


def trajectory_probe(
    params: ModelParams,
    task: SyntheticTask,
    grid: TimeGrid,
    schedule: NoiseSchedule,
    n_pairs: int,
    rng: np.random.Generator,
    cfg: CfgSpec | None = None,
    feature_dim: int = 8,
    feature_seed: int = 0,
) -> ProbeResult:
    """Compare predictions made along the pretraining, backward and forward trajectories.

    For each of ``n_pairs`` (prompt, x1) draws, three trajectories are built:
    forward-corrupted x1 (pretrain), the model's own reverse process
    (backward), and the model's clean sample re-noised by the forward process
    (forward). At every knot one prediction per state is sampled and the
    prediction sets of the backward and forward families are compared with the
    pretrain family.
    """
    if n_pairs < MIN_PROBE_PAIRS:
        raise StatisticsError(f"trajectory_probe needs at least {MIN_PROBE_PAIRS} pairs, got {n_pairs}")
    cfg = cfg or CfgSpec()
    K, D = task.space.vocab_size, task.space.seq_len
    r_data, r_roll, r_fwd, r_pred = rng.spawn(4)
    prompts = np.arange(n_pairs) % task.num_prompts
    x1 = sample_clean(task, prompts, r_data)
    pretrain_states = np.stack(
        [build_pretrain_trajectory(x1[i], grid, schedule, r_data, K) for i in range(n_pairs)], axis=1)
    rollouts = sample_rollouts(params, prompts, grid, cfg, r_roll.spawn(n_pairs), schedule)
    backward_states = np.stack([r.states for r in rollouts], axis=1)
    clean = np.stack([r.clean for r in rollouts])
    forward_states = np.stack([reconstruct_forward_state(clean, t, schedule, r_fwd, K) for t in grid.knots])

    feats = RandomProjectionFeatures(K, D, feature_dim, feature_seed)
    half = n_pairs // 2
    rows = []
    for j, t in enumerate(grid.knots):
        _, pred_pre = _predict(params, pretrain_states[j], t, prompts, cfg, r_pred)
        probs_bwd, pred_bwd = _predict(params, backward_states[j], t, prompts, cfg, r_pred)
        _, pred_fwd = _predict(params, forward_states[j], t, prompts, cfg, r_pred)
        rows.append({
            "knot": j,
            "t": float(t),
            "entropy_backward": field_entropy(probs_bwd),
            "frechet_fwd": frechet_feature_distance(pred_fwd, pred_pre, feats),
            "frechet_bwd": frechet_feature_distance(pred_bwd, pred_pre, feats),
            "tv_fwd": token_marginal_tv(pred_fwd, pred_pre, K),
            "tv_bwd": token_marginal_tv(pred_bwd, pred_pre, K),
            "frechet_self": frechet_feature_distance(pred_pre[:half], pred_pre[half:], feats),
        })
    warning = None
    final_entropy = rows[-1]["entropy_backward"]
    if final_entropy > 0.9 * np.log(K):
        warning = "model predictions are near-uniform at t=1; parameters look untrained"
    return ProbeResult(rows, warning, {"clean_samples": clean, "reference_x1": x1})


__all__ = [
    "PROBE_CSV_COLUMNS",
    "ProbeResult",
    "RandomProjectionFeatures",
    "field_entropy",
    "frechet_feature_distance",
    "frechet_from_moments",
    "token_marginal_tv",
    "trajectory_probe",
]

"""Reverse-process rollouts and the three trajectory families.

A rollout starts from uniform noise and, at each knot t_j, samples an
intermediate prediction x_1^{t_j} from the (optionally guided) model field,
then applies the Euler jump rule toward it. Everything the policy-gradient
trainer needs later is recorded, including the old-policy log-probabilities of
both candidate actions (the intermediate prediction and the final clean
sample), so every training variant can replay the same sampled data.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import IO, Sequence

import numpy as np

from .core import (
    LinearSchedule,
    NoiseSchedule,
    TimeGrid,
    euler_step,
    forward_corrupt,
    gather_tokens,
    log_softmax,
    sample_categorical,
)
from .denoiser import ModelParams, cfg_combine, policy_logits
from .errors import DomainError


@dataclass(frozen=True)
class CfgSpec:
    enabled: bool = False
    guidance_scale: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.guidance_scale) or self.guidance_scale < 0:
            raise DomainError(f"guidance_scale must be finite and >= 0, got {self.guidance_scale}")

    @property
    def guidance(self) -> float | None:
        return self.guidance_scale if self.enabled else None


@dataclass(frozen=True)
class RolloutRecord:
    prompt: int
    grid: TimeGrid
    states: np.ndarray  # (T+1, D); states[0] ~ Unif([K])^D
    intermediate_preds: np.ndarray  # (T, D)
    clean: np.ndarray  # (D,), equals intermediate_preds[-1]
    old_logprob_intermediate: np.ndarray  # (T,)
    old_logprob_clean: np.ndarray  # (T,)
    n_model_evals: int
    reward: float | None = None
    advantage: float | None = None

    def with_reward(self, reward: float) -> "RolloutRecord":
        return replace(self, reward=float(reward))

    def with_advantage(self, advantage: float) -> "RolloutRecord":
        return replace(self, advantage=float(advantage))


def _rollout_chunk(params_old, prompts, grid, cfg, schedule, rngs):
    arch = params_old.arch
    n, T, D = len(prompts), grid.num_steps, arch.seq_len
    prompts = np.asarray(prompts, dtype=np.int64)
    states = np.empty((n, T + 1, D), dtype=np.int64)
    preds = np.empty((n, T, D), dtype=np.int64)
    logp_tables = np.empty((n, T, D, arch.vocab_size))
    for i, rng in enumerate(rngs):
        states[i, 0] = rng.integers(0, arch.vocab_size, size=D, dtype=np.int64)
    for j in range(T):
        t, dt = grid.t(j), grid.dt(j)
        logits = policy_logits(params_old, states[:, j], t, prompts, cfg.guidance)
        logp = log_softmax(logits)
        logp_tables[:, j] = logp
        probs = np.exp(logp)
        for i, rng in enumerate(rngs):
            preds[i, j] = sample_categorical(probs[i], rng.random(D))
            states[i, j + 1] = euler_step(states[i, j], preds[i, j], t, dt, schedule, rng)
    clean = preds[:, -1]
    lp_inter = gather_tokens(logp_tables, preds).sum(axis=-1)
    lp_clean = gather_tokens(logp_tables, np.broadcast_to(clean[:, None, :], preds.shape)).sum(axis=-1)
    evals = T * (2 if cfg.enabled else 1)
    return [
        RolloutRecord(int(prompts[i]), grid, states[i], preds[i], clean[i].copy(),
                      lp_inter[i], lp_clean[i], evals)
        for i in range(n)
    ]


def sample_rollouts(
    params_old: ModelParams,
    prompts: Sequence[int],
    grid: TimeGrid,
    cfg: CfgSpec,
    rngs: Sequence[np.random.Generator],
    schedule: NoiseSchedule | None = None,
    workers: int = 1,
) -> list[RolloutRecord]:
    """Batched rollouts; rollout i draws only from ``rngs[i]``.

    Sampled tokens do not depend on batching or ``workers``: each rollout is
    a pure function of its prompt, its generator and the frozen parameters.
    Recorded log-probabilities agree across batchings to rounding (matrix
    products may sum in a different order), and are bit-identical for a
    fixed ``workers`` value.
    """
    if len(prompts) != len(rngs):
        raise DomainError("need exactly one generator per rollout")
    schedule = schedule or LinearSchedule()
    n = len(prompts)
    if workers <= 1 or n < 2:
        return _rollout_chunk(params_old, prompts, grid, cfg, schedule, rngs)
    bounds = np.linspace(0, n, min(workers, n) + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(
            lambda ab: _rollout_chunk(params_old, prompts[ab[0]:ab[1]], grid, cfg, schedule, rngs[ab[0]:ab[1]]),
            list(zip(bounds[:-1], bounds[1:])),
        )
        return [rec for part in parts for rec in part]


def sample_rollout(
    params_old: ModelParams,
    c: int,
    grid: TimeGrid,
    cfg: CfgSpec,
    rng: np.random.Generator,
    schedule: NoiseSchedule | None = None,
) -> RolloutRecord:
    return sample_rollouts(params_old, [c], grid, cfg, [rng], schedule)[0]


def reconstruct_forward_state(clean, t: float, schedule: NoiseSchedule, rng: np.random.Generator,
                              vocab_size: int) -> np.ndarray:
    """A state of the forward-process trajectory: the rollout's clean sample re-noised to time t."""
    return forward_corrupt(clean, t, schedule, rng, vocab_size)


def build_pretrain_trajectory(x1, grid: TimeGrid, schedule: NoiseSchedule, rng: np.random.Generator,
                              vocab_size: int) -> np.ndarray:
    """Forward-corrupt a dataset sample at every knot; returns (T+1, D) states."""
    return np.stack([forward_corrupt(x1, t, schedule, rng, vocab_size) for t in grid.knots])


TRAJECTORY_DUMP_COLUMNS = ("step", "t", "state", "prediction")


def dump_trajectory(record: RolloutRecord, fh: IO[str]) -> None:
    """Write one tab-separated line per knot: step, t, state tokens, prediction tokens.

    Tokens are space-separated; the final knot has no prediction and writes ``-``.
    """
    fh.write("#" + "\t".join(TRAJECTORY_DUMP_COLUMNS) + "\n")
    T = record.grid.num_steps
    for j in range(T + 1):
        state = " ".join(map(str, record.states[j]))
        pred = " ".join(map(str, record.intermediate_preds[j])) if j < T else "-"
        fh.write(f"{j}\t{record.grid.t(j)!r}\t{state}\t{pred}\n")


__all__ = [
    "CfgSpec",
    "RolloutRecord",
    "build_pretrain_trajectory",
    "cfg_combine",
    "dump_trajectory",
    "reconstruct_forward_state",
    "sample_rollout",
    "sample_rollouts",
]

"""Cross-entropy pretraining with condition dropout."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import NoiseSchedule, forward_corrupt
from .denoiser import AdamState, LossBatch, LossSpec, ModelParams, adamw_step, loss_and_grad
from .errors import ConfigError, DomainError, StatisticsError
from .tasks import SyntheticTask, sample_clean

PRETRAIN_CSV_COLUMNS = ("step", "ce_loss", "grad_norm", "wallclock_ms")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01


def make_pretrain_batch(
    task: SyntheticTask,
    schedule: NoiseSchedule,
    cond_drop_p: float,
    rng: np.random.Generator,
    batch_size: int,
) -> LossBatch:
    """Sample (c, x1, t, x_t) items; dropped conditions become the NULL id (= P)."""
    if task.num_prompts < 1:
        raise ConfigError("task has no prompts")
    if not 0.0 <= cond_drop_p <= 1.0:
        raise DomainError(f"cond_drop_p must lie in [0, 1], got {cond_drop_p}")
    c = rng.integers(0, task.num_prompts, size=batch_size)
    x1 = sample_clean(task, c, rng)
    t = rng.random(batch_size)
    x_t = forward_corrupt(x1, t, schedule, rng, task.space.vocab_size)
    drop = rng.random(batch_size) < cond_drop_p
    cond = np.where(drop, task.num_prompts, c)
    return LossBatch(x_t, t, cond, x1, np.full(batch_size, 1.0 / batch_size))


def pretrain_step(
    params: ModelParams,
    opt_state: AdamState,
    task: SyntheticTask,
    schedule: NoiseSchedule,
    cond_drop_p: float,
    rng: np.random.Generator,
    batch_size: int = 64,
    optim: OptimConfig = OptimConfig(),
) -> tuple[ModelParams, AdamState, float, float]:
    """One AdamW step on the batch-mean CE; returns (params, state, loss, grad_norm)."""
    batch = make_pretrain_batch(task, schedule, cond_drop_p, rng, batch_size)
    loss, grad = loss_and_grad(params, batch, LossSpec("cross_entropy"))
    params, opt_state = adamw_step(params, grad, opt_state, optim.lr, optim.beta1,
                                   optim.beta2, optim.weight_decay)
    return params, opt_state, loss, float(np.linalg.norm(grad))


def evaluate_ce(
    params: ModelParams,
    task: SyntheticTask,
    schedule: NoiseSchedule,
    n_samples: int,
    rng: np.random.Generator,
    chunk: int = 512,
) -> float:
    """Monte-Carlo estimate of the conditional CE objective on fresh samples."""
    if n_samples < 1:
        raise StatisticsError("n_samples must be >= 1")
    total, done = 0.0, 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        batch = make_pretrain_batch(task, schedule, 0.0, rng, m)
        batch.weights = np.ones(m)
        loss, _ = loss_and_grad(params, batch, LossSpec("cross_entropy"))
        total += loss
        done += m
    return total / n_samples


def run_pretrain(
    params: ModelParams,
    task: SyntheticTask,
    schedule: NoiseSchedule,
    steps: int,
    rng: np.random.Generator,
    batch_size: int = 64,
    cond_drop_p: float = 0.1,
    optim: OptimConfig = OptimConfig(),
    on_step: Callable[[dict], None] | None = None,
    wallclock: bool = True,
) -> tuple[ModelParams, list[float]]:
    """Run ``steps`` pretraining steps; ``on_step`` receives one CSV-shaped row per step."""
    state = AdamState.zeros(params.values.size)
    losses = []
    for step in range(steps):
        t0 = time.perf_counter()
        params, state, loss, gnorm = pretrain_step(params, state, task, schedule, cond_drop_p,
                                                   rng, batch_size, optim)
        losses.append(loss)
        if on_step is not None:
            ms = (time.perf_counter() - t0) * 1e3 if wallclock else 0.0
            on_step({"step": step, "ce_loss": loss, "grad_norm": gnorm, "wallclock_ms": ms})
    return params, losses

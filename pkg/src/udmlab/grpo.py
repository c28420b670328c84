"""Group-relative policy optimization for uniform discrete diffusion.

The trainer supports the full ablation grid:

* ``trajectory_variant``: ``backward`` trains on the states the sampler
  visited; ``forward`` re-noises each rollout's clean sample to the selected
  time with the forward process.
* ``action_variant``: ``intermediate`` scores the prediction sampled at that
  step; ``clean`` scores the final clean sample at every step.
* ``timestep_mode``: all steps, or three consecutive steps chosen from the
  first half of the grid (``reduced_early``) or from anywhere
  (``reduced_random``).
* CFG on or off for both sampling and the policy probability.

With ``forward`` + ``clean`` the policy probability at step t is
p_theta(x_hat_1 | x_hat_t, c), so the policy-gradient term is an
advantage-weighted version of the pretraining cross-entropy.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import NoiseSchedule, TimeGrid, gather_tokens, log_softmax
from .denoiser import AdamState, LossBatch, LossSpec, ModelParams, adamw_step, loss_and_grad, policy_logits
from .errors import ConfigError, DomainError, NumericError
from .pretrain import OptimConfig
from .rng import stream
from .rollout import CfgSpec, RolloutRecord, reconstruct_forward_state, sample_rollouts
from .tasks import RewardSpec, SyntheticTask, reward

RL_CSV_COLUMNS = ("step", "reward_mean", "reward_std", "kl", "clip_frac", "ratio_mean", "loss",
                  "grad_norm", "wallclock_ms")

TRAJECTORY_VARIANTS = ("backward", "forward")
ACTION_VARIANTS = ("intermediate", "clean")
TIMESTEP_MODES = ("all", "reduced_early", "reduced_random")
DEGENERATE_STD = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 8
    groups_per_batch: int = 8
    clip_eps: float = 0.2
    kl_weight: float = 0.04
    trajectory_variant: str = "forward"
    action_variant: str = "clean"
    timestep_mode: str = "reduced_early"
    cfg: CfgSpec = field(default_factory=CfgSpec)
    cfg_grad: str = "guided"
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=1e-4))
    num_steps: int = 10
    reward: RewardSpec = field(default_factory=RewardSpec)

    def __post_init__(self):
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2", key="group_size")
        if self.groups_per_batch < 1:
            raise ConfigError("groups_per_batch must be >= 1", key="groups_per_batch")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError("clip_eps must lie in (0, 1)", key="clip_eps")
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be >= 0", key="kl_weight")
        for key, allowed in (("trajectory_variant", TRAJECTORY_VARIANTS),
                             ("action_variant", ACTION_VARIANTS),
                             ("timestep_mode", TIMESTEP_MODES),
                             ("cfg_grad", ("guided", "conditional"))):
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}", key=key)
        if self.timestep_mode != "all" and self.num_steps < 6:
            raise ConfigError("reduced timestep modes need at least 6 steps", key="num_steps")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.num_steps)


@dataclass
class GroupBatch:
    prompt: int
    rollouts: list[RolloutRecord]
    advantages: np.ndarray


@dataclass
class MdpView:
    state: np.ndarray
    t: float
    prompt: int
    action: np.ndarray
    step: int


def compute_advantages(rewards) -> np.ndarray:
    """(R - mean) / std with the population std; all zeros for a degenerate group."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ConfigError("a group needs at least two rewards", key="group_size")
    centered = r - r.mean()
    std = np.sqrt(np.mean(centered ** 2))
    if std < DEGENERATE_STD:
        return np.zeros_like(r)
    adv = centered / std
    # re-center: removes the last-ulp bias of the division
    return adv - adv.mean()


def select_timesteps(mode: str, grid: TimeGrid, rng: np.random.Generator) -> list[int]:
    T = grid.num_steps
    if mode == "all":
        return list(range(T))
    if mode not in TIMESTEP_MODES:
        raise DomainError(f"unknown timestep mode {mode!r}")
    if T < 6:
        raise ConfigError(f"{mode} needs at least 6 steps, grid has {T}", key="num_steps")
    limit = math.ceil(T / 2) if mode == "reduced_early" else T
    start = int(rng.integers(0, limit - 2))
    return [start, start + 1, start + 2]


def build_mdp_view(config: TrainConfig, record: RolloutRecord, j: int, schedule: NoiseSchedule,
                   rng: np.random.Generator, vocab_size: int) -> MdpView:
    """State and action for step ``j`` of ``record`` under the configured variant.

    The forward variant draws a fresh re-noised state from ``rng`` on every call.
    """
    T = record.grid.num_steps
    if not 0 <= j < T:
        raise DomainError(f"step index {j} outside [0, {T})")
    t = record.grid.t(j)
    if config.trajectory_variant == "backward":
        state = record.states[j]
    else:
        state = reconstruct_forward_state(record.clean, t, schedule, rng, vocab_size)
    action = record.intermediate_preds[j] if config.action_variant == "intermediate" else record.clean
    return MdpView(np.asarray(state, dtype=np.int64), t, record.prompt, np.asarray(action, dtype=np.int64), j)


def view_logprob(params: ModelParams, view: MdpView, cfg: CfgSpec) -> float:
    logits = policy_logits(params, view.state, view.t, view.prompt, cfg.guidance)[0]
    return float(gather_tokens(log_softmax(logits), view.action).sum())


def policy_ratio(params: ModelParams, params_old: ModelParams, view: MdpView, cfg: CfgSpec) -> float:
    """p_theta(action | state) / p_theta_old(action | state) at the view's state."""
    old = view_logprob(params_old, view, cfg)
    if not np.isfinite(old):
        raise NumericError("old-policy log-probability is not finite")
    with np.errstate(over="ignore"):
        ratio = float(np.exp(view_logprob(params, view, cfg) - old))
    if not np.isfinite(ratio):
        raise NumericError("policy ratio overflowed")
    return ratio


def clipped_objective(ratio: float, advantage: float, eps: float) -> float:
    return min(ratio * advantage, min(max(ratio, 1.0 - eps), 1.0 + eps) * advantage)


def categorical_kl(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """KL(p || q) per row, from log-probabilities."""
    return (np.exp(logp) * (logp - logq)).sum(axis=-1)


def kl_penalty(params: ModelParams, params_ref: ModelParams, view: MdpView, cfg: CfgSpec) -> float:
    """Position-averaged KL between the policy and reference fields at the view state."""
    lp = log_softmax(policy_logits(params, view.state, view.t, view.prompt, cfg.guidance)[0])
    lq = log_softmax(policy_logits(params_ref, view.state, view.t, view.prompt, cfg.guidance)[0])
    return float(categorical_kl(lp, lq).mean())


def build_views(config: TrainConfig, batch: list[GroupBatch], schedule: NoiseSchedule,
                rng: np.random.Generator, vocab_size: int):
    """All (rollout, selected step) views plus their advantages and the 1/(groups * G * steps) averaging weights."""
    views, advs, weights = [], [], []
    n_groups = len(batch)
    rollout_rngs = rng.spawn(sum(len(g.rollouts) for g in batch))
    k = 0
    for group in batch:
        G = len(group.rollouts)
        for rec, adv in zip(group.rollouts, group.advantages):
            r_rng = rollout_rngs[k]
            k += 1
            steps = select_timesteps(config.timestep_mode, rec.grid, r_rng)
            for j in steps:
                views.append(build_mdp_view(config, rec, j, schedule, r_rng, vocab_size))
                advs.append(adv)
                weights.append(1.0 / (n_groups * G * len(steps)))
    return views, np.asarray(advs), np.asarray(weights)


def _stack_views(views: list[MdpView]):
    return (np.stack([v.state for v in views]), np.array([v.t for v in views]),
            np.array([v.prompt for v in views], dtype=np.int64), np.stack([v.action for v in views]))


def grpo_update(
    params: ModelParams,
    params_old: ModelParams,
    params_ref: ModelParams,
    batch: list[GroupBatch],
    config: TrainConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    opt_state: AdamState,
) -> tuple[ModelParams, ModelParams, AdamState, dict]:
    """One policy-optimization step over a batch of groups.

    Returns ``(params, params_old, opt_state, metrics)`` where the new
    ``params_old`` is a snapshot of the updated ``params``. Inputs are never
    mutated, so a ``NumericError`` leaves the caller's state intact.
    """
    views, advs, weights = build_views(config, batch, schedule, rng, params.arch.vocab_size)
    x, t, c, actions = _stack_views(views)
    guidance = config.cfg.guidance
    old_logp = gather_tokens(log_softmax(policy_logits(params_old, x, t, c, guidance)), actions).sum(axis=-1)
    if not np.all(np.isfinite(old_logp)):
        bad = int(np.argmin(np.isfinite(old_logp)))
        raise NumericError("old-policy log-probability is not finite", index=bad)
    ref_logp = log_softmax(policy_logits(params_ref, x, t, c, guidance))
    spec = LossSpec("grpo_surrogate", advantages=advs, old_logprob=old_logp, ref_logprobs=ref_logp,
                    clip_eps=config.clip_eps, kl_weight=config.kl_weight, guidance=guidance,
                    cfg_grad=config.cfg_grad)
    loss, grad = loss_and_grad(params, LossBatch(x, t, c, actions, weights), spec)
    o = config.optim
    new_params, new_state = adamw_step(params, grad, opt_state, o.lr, o.beta1, o.beta2, o.weight_decay)
    # every rollout contributes the same number of views, so plain means match the loss weighting
    metrics = {
        "loss": loss,
        "ratio_mean": float(np.mean(spec.stats["ratio"])),
        "clip_frac": float(np.mean(spec.stats["clipped"])),
        "kl": float(np.mean(spec.stats["kl"])),
        "grad_norm": float(np.linalg.norm(grad)),
        "n_items": len(views),
    }
    return new_params, new_params.copy(), new_state, metrics


def group_prompt(update: int, group: int, config: TrainConfig, num_prompts: int) -> int:
    """Groups cycle through the prompt set so every prompt gets equal budget."""
    return (update * config.groups_per_batch + group) % num_prompts


def collect_batch(
    params_old: ModelParams,
    task: SyntheticTask,
    config: TrainConfig,
    schedule: NoiseSchedule,
    seed: int,
    update: int,
    workers: int = 1,
) -> list[GroupBatch]:
    """Sample every group of one update and attach rewards and advantages."""
    G = config.group_size
    prompts, rngs = [], []
    for g in range(config.groups_per_batch):
        c = group_prompt(update, g, config, task.num_prompts)
        for i in range(G):
            prompts.append(c)
            rngs.append(stream(seed, "rl", update, "group", g, "rollout", i))
    records = sample_rollouts(params_old, prompts, config.grid, config.cfg, rngs, schedule, workers)
    batch = []
    for g in range(config.groups_per_batch):
        recs = records[g * G:(g + 1) * G]
        rewards = reward(config.reward, task, np.stack([r.clean for r in recs]), recs[0].prompt)
        adv = compute_advantages(rewards)
        recs = [r.with_reward(rw).with_advantage(a) for r, rw, a in zip(recs, rewards, adv)]
        batch.append(GroupBatch(recs[0].prompt, recs, adv))
    return batch


def train_rl(
    params: ModelParams,
    task: SyntheticTask,
    config: TrainConfig,
    schedule: NoiseSchedule,
    seed: int,
    updates: int,
    on_update: Callable[[dict], None] | None = None,
    workers: int = 1,
    wallclock: bool = True,
) -> tuple[ModelParams, list[dict]]:
    """Run ``updates`` iterations of sample -> advantages -> one clipped update -> refresh.

    theta, theta_old and theta_ref all start from ``params``; theta_ref stays frozen.
    """
    params_ref = params.copy()
    params_old = params.copy()
    params = params.copy()
    opt_state = AdamState.zeros(params.values.size)
    history = []
    for n in range(updates):
        t0 = time.perf_counter()
        batch = collect_batch(params_old, task, config, schedule, seed, n, workers)
        rewards = np.concatenate([[r.reward for r in g.rollouts] for g in batch])
        params, params_old, opt_state, m = grpo_update(params, params_old, params_ref, batch, config,
                                                       schedule, stream(seed, "rl", n, "update"), opt_state)
        row = {
            "step": n,
            "reward_mean": float(rewards.mean()),
            "reward_std": float(rewards.std()),
            "kl": m["kl"],
            "clip_frac": m["clip_frac"],
            "ratio_mean": m["ratio_mean"],
            "loss": m["loss"],
            "grad_norm": m["grad_norm"],
            "wallclock_ms": (time.perf_counter() - t0) * 1e3 if wallclock else 0.0,
        }
        history.append(row)
        if on_update is not None:
            on_update(row)
    return params, history


def evaluate_reward(
    params: ModelParams,
    task: SyntheticTask,
    reward_spec: RewardSpec,
    grid: TimeGrid,
    cfg: CfgSpec,
    schedule: NoiseSchedule,
    n_per_prompt: int,
    seed: int,
    workers: int = 1,
) -> float:
    """Mean terminal reward over ``n_per_prompt`` rollouts for every prompt."""
    prompts = [c for c in range(task.num_prompts) for _ in range(n_per_prompt)]
    rngs = [stream(seed, "eval", c, i) for c in range(task.num_prompts) for i in range(n_per_prompt)]
    recs = sample_rollouts(params, prompts, grid, cfg, rngs, schedule, workers)
    rewards = reward(reward_spec, task, np.stack([r.clean for r in recs]), np.asarray(prompts))
    return float(np.mean(rewards))

"""Flat ``key = value`` run configuration.

Lines may carry ``#`` comments. Every key has a default; unknown keys and
unparsable values raise ``ConfigError`` naming the key, so a typo in an
ablation sweep fails loudly instead of silently running the default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .core import make_schedule
from .denoiser import Arch
from .errors import ConfigError, UDMError
from .grpo import TrainConfig
from .pretrain import OptimConfig
from .rollout import CfgSpec
from .tasks import RewardSpec, SyntheticTask


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # task
    task_file: str = ""
    vocab_size: int = 16
    seq_len: int = 24
    num_prompts: int = 4
    p_target: float = 0.6
    p_distractor: float = 0.0
    reward_kind: str = "token_match"
    # model
    embed_dim: int = 32
    hidden_dim: int = 64
    num_blocks: int = 2
    time_dim: int = 8
    init_scale: float = 0.05
    schedule: str = "linear"
    # optimizer (shared)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    weight_decay: float = 0.01
    # pretraining
    pretrain_steps: int = 2000
    pretrain_batch: int = 64
    pretrain_lr: float = 1e-3
    cond_drop_p: float = 0.1
    # reinforcement learning
    rl_updates: int = 300
    rl_lr: float = 1e-4
    group_size: int = 8
    groups_per_batch: int = 8
    clip_eps: float = 0.2
    kl_weight: float = 0.04
    trajectory_variant: str = "forward"
    action_variant: str = "clean"
    timestep_mode: str = "reduced_early"
    cfg_enabled: bool = False
    guidance_scale: float = 2.0
    cfg_grad: str = "guided"
    sample_steps: int = 10
    # evaluation and probing
    eval_steps: int = 10
    eval_rollouts: int = 256
    probe_pairs: int = 512
    probe_feature_dim: int = 8
    probe_feature_seed: int = 0
    # logging
    wallclock: bool = True

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def arch(self) -> Arch:
        try:
            return Arch(self.vocab_size, self.seq_len, self.num_prompts, self.embed_dim,
                        self.hidden_dim, self.num_blocks, self.time_dim)
        except UDMError as exc:
            raise ConfigError(str(exc)) from None

    def task(self, base_dir: Path | None = None) -> SyntheticTask:
        if self.task_file:
            path = Path(self.task_file)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            try:
                task = SyntheticTask.from_text(path.read_text())
            except OSError as exc:
                raise ConfigError(f"cannot read task_file: {exc}", key="task_file") from None
            if (task.space.vocab_size, task.space.seq_len, task.num_prompts) != (
                    self.vocab_size, self.seq_len, self.num_prompts):
                raise ConfigError("task_file K/D/P disagree with vocab_size/seq_len/num_prompts",
                                  key="task_file")
            return task
        return SyntheticTask.default(self.vocab_size, self.seq_len, self.num_prompts,
                                     self.p_target, self.p_distractor)

    def schedule_obj(self):
        try:
            return make_schedule(self.schedule)
        except UDMError:
            raise ConfigError(f"unknown schedule {self.schedule!r}", key="schedule") from None

    def pretrain_optim(self) -> OptimConfig:
        return OptimConfig(self.pretrain_lr, self.adam_beta1, self.adam_beta2, self.weight_decay)

    def cfg(self) -> CfgSpec:
        try:
            return CfgSpec(self.cfg_enabled, self.guidance_scale)
        except UDMError as exc:
            raise ConfigError(str(exc), key="guidance_scale") from None

    def train_config(self) -> TrainConfig:
        try:
            reward = RewardSpec(self.reward_kind)
        except UDMError:
            raise ConfigError(f"unknown reward_kind {self.reward_kind!r}", key="reward_kind") from None
        return TrainConfig(
            group_size=self.group_size,
            groups_per_batch=self.groups_per_batch,
            clip_eps=self.clip_eps,
            kl_weight=self.kl_weight,
            trajectory_variant=self.trajectory_variant,
            action_variant=self.action_variant,
            timestep_mode=self.timestep_mode,
            cfg=self.cfg(),
            cfg_grad=self.cfg_grad,
            optim=OptimConfig(self.rl_lr, self.adam_beta1, self.adam_beta2, self.weight_decay),
            num_steps=self.sample_steps,
            reward=reward,
        )

    def validate(self) -> "RunConfig":
        """Build every derived object once so bad values surface before a run starts."""
        self.arch()
        self.schedule_obj()
        self.train_config()
        if not 0.0 <= self.cond_drop_p <= 1.0:
            raise ConfigError("cond_drop_p must lie in [0, 1]", key="cond_drop_p")
        for key in ("pretrain_steps", "rl_updates"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0", key=key)
        for key in ("pretrain_batch", "eval_steps", "eval_rollouts", "probe_feature_dim"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key=key)
        return self

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key: str, typ, raw: str):
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw, 0)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}", key=key) from None


def parse_config(text: str, **overrides) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        values[key] = _convert(key, types[key], val)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values).validate()


def load_config(path, **overrides) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, **overrides)

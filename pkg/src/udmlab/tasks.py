"""Synthetic prompt-conditioned sequence tasks and programmatic terminal rewards."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import SpaceSpec
from .errors import ConfigError, DomainError

REWARD_KINDS = ("token_match", "count_match", "bigram_pattern")


@dataclass
class SyntheticTask:
    """Each prompt c prefers one target token.

    A clean sample for prompt c puts ``targets[c]`` at each position with
    probability ``p_target`` and otherwise a uniform token among the other
    K - 1 values.

    With ``p_distractor > 0`` a whole sequence instead uses the prompt's
    distractor token as its mode with that probability. Positions are then
    dependent given the prompt, which a per-position denoiser cannot
    represent exactly.
    """

    space: SpaceSpec
    targets: list[int]
    target_counts: list[int]
    bigrams: list[tuple[int, int]]
    p_target: float = 0.6
    p_distractor: float = 0.0
    distractors: list[int] | None = None

    def __post_init__(self):
        K, D = self.space.vocab_size, self.space.seq_len
        if not self.targets:
            raise ConfigError("task has no prompts", key="num_prompts")
        if not (len(self.targets) == len(self.target_counts) == len(self.bigrams)):
            raise ConfigError("per-prompt lists have different lengths")
        for tok in self.targets + [t for pair in self.bigrams for t in pair]:
            if not 0 <= tok < K:
                raise ConfigError(f"target token {tok} outside [0, {K})")
        for n in self.target_counts:
            if not 0 <= n <= D:
                raise ConfigError(f"target count {n} outside [0, {D}]")
        if not 0.0 <= self.p_target <= 1.0:
            raise ConfigError("p_target must lie in [0, 1]", key="p_target")
        if not 0.0 <= self.p_distractor <= 1.0:
            raise ConfigError("p_distractor must lie in [0, 1]", key="p_distractor")
        if self.distractors is None:
            self.distractors = [(tok + K // 2) % K for tok in self.targets]
        if len(self.distractors) != len(self.targets):
            raise ConfigError("need one distractor per prompt")
        for tok in self.distractors:
            if not 0 <= tok < K:
                raise ConfigError(f"distractor token {tok} outside [0, {K})")

    @property
    def num_prompts(self) -> int:
        return len(self.targets)

    @classmethod
    def default(cls, vocab_size: int = 16, seq_len: int = 24, num_prompts: int = 4,
                p_target: float = 0.6, p_distractor: float = 0.0) -> "SyntheticTask":
        """Targets spread evenly over the vocabulary; target count D // 2."""
        if num_prompts < 1:
            raise ConfigError("num_prompts must be >= 1", key="num_prompts")
        space = SpaceSpec(vocab_size, seq_len)
        targets = [(c * vocab_size) // num_prompts for c in range(num_prompts)]
        return cls(
            space=space,
            targets=targets,
            target_counts=[seq_len // 2] * num_prompts,
            bigrams=[(tok, (tok + 1) % vocab_size) for tok in targets],
            p_target=p_target,
            p_distractor=p_distractor,
        )

    def to_text(self) -> str:
        lines = [
            f"K={self.space.vocab_size}",
            f"D={self.space.seq_len}",
            f"P={self.num_prompts}",
            f"p_target={self.p_target!r}",
            f"p_distractor={self.p_distractor!r}",
        ]
        for c in range(self.num_prompts):
            a, b = self.bigrams[c]
            lines.append(f"target_{c}={self.targets[c]}")
            lines.append(f"count_{c}={self.target_counts[c]}")
            lines.append(f"bigram_{c}={a},{b}")
            lines.append(f"distractor_{c}={self.distractors[c]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SyntheticTask":
        """Parse the key=value task description written by ``to_text``."""
        kv: dict[str, str] = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"malformed task line {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            kv[k] = v
        try:
            K, D, P = int(kv.pop("K")), int(kv.pop("D")), int(kv.pop("P"))
            p_target = float(kv.pop("p_target", "0.6"))
            p_distractor = float(kv.pop("p_distractor", "0.0"))
            targets, counts, bigrams, distractors = [], [], [], []
            for c in range(P):
                targets.append(int(kv.pop(f"target_{c}")))
                counts.append(int(kv.pop(f"count_{c}", str(D // 2))))
                bg = kv.pop(f"bigram_{c}", None)
                if bg is None:
                    bigrams.append((targets[-1], (targets[-1] + 1) % K))
                else:
                    a, b = bg.split(",")
                    bigrams.append((int(a), int(b)))
                dis = kv.pop(f"distractor_{c}", None)
                distractors.append((targets[-1] + K // 2) % K if dis is None else int(dis))
        except KeyError as exc:
            key = exc.args[0]
            raise ConfigError(f"task file missing key {key!r}", key=key) from None
        except ValueError as exc:
            raise ConfigError(f"bad task value: {exc}") from None
        if kv:
            key = sorted(kv)[0]
            raise ConfigError(f"unknown task key {key!r}", key=key)
        return cls(SpaceSpec(K, D), targets, counts, bigrams, p_target, p_distractor, distractors)


def sample_clean(task: SyntheticTask, c, rng: np.random.Generator) -> np.ndarray:
    """Draw x1 for prompt ``c`` (a scalar id, or an array of ids for a batch)."""
    c_arr = np.asarray(c, dtype=np.int64)
    if np.any(c_arr < 0) or np.any(c_arr >= task.num_prompts):
        raise DomainError(f"prompt id outside [0, {task.num_prompts})")
    K, D = task.space.vocab_size, task.space.seq_len
    shape = c_arr.shape + (D,)
    target = np.asarray(task.targets, dtype=np.int64)[c_arr][..., None]
    if task.p_distractor > 0.0:
        distract = rng.random(c_arr.shape) < task.p_distractor
        target = np.where(distract[..., None], np.asarray(task.distractors, dtype=np.int64)[c_arr][..., None], target)
    hit = rng.random(shape) < task.p_target
    # uniform over the K - 1 non-target tokens
    other = rng.integers(0, K - 1, size=shape, dtype=np.int64)
    other = other + (other >= target)
    return np.where(hit, target, other)


@dataclass(frozen=True)
class RewardSpec:
    kind: str = "token_match"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise DomainError(f"unknown reward kind {self.kind!r}; choose from {REWARD_KINDS}")


def reward(spec: RewardSpec, task: SyntheticTask, x: np.ndarray, c) -> float | np.ndarray:
    """Terminal reward in [0, 1]; vectorized over leading axes of ``x`` and ``c``."""
    x = np.asarray(x, dtype=np.int64)
    c = np.asarray(c, dtype=np.int64)
    D = x.shape[-1]
    target = np.asarray(task.targets)[c][..., None]
    if spec.kind == "token_match":
        out = (x == target).mean(axis=-1)
    elif spec.kind == "count_match":
        want = np.asarray(task.target_counts)[c]
        out = 1.0 - np.abs((x == target).sum(axis=-1) - want) / D
    else:
        if D < 2:
            return np.zeros(x.shape[:-1]) if x.ndim > 1 else 0.0
        bg = np.asarray(task.bigrams)[c]
        a, b = bg[..., 0:1], bg[..., 1:2]
        out = ((x[..., :-1] == a) & (x[..., 1:] == b)).mean(axis=-1)
    out = np.asarray(out, dtype=np.float64)
    return float(out) if out.ndim == 0 else out

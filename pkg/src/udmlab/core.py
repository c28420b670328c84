"""State space, noise schedules and the two-stage Euler sampler for uniform discrete diffusion.

Conventions: t=0 is pure noise (every token uniform over the vocabulary) and
t=1 is clean data. The conditional path is the per-token mixture

    p_t(x | x1) = prod_l [ kappa(t) * [x_l == x1_l] + (1 - kappa(t)) / K ]

and the conditional velocity toward a prediction x1 is
``kappa_dot / (1 - kappa) * (delta_{x1} - delta_{x_t})``. Both are the
standard choices for a uniform source; the model itself does not depend on
them beyond the sampler.

Token sequences are plain ``int64`` arrays whose last axis has length D;
categorical fields are ``float64`` arrays of shape ``(..., D, K)``.
Every sampling function takes an explicit ``numpy.random.Generator`` and
always consumes the same number of draws for a given input shape, so results
are bit-reproducible given the generator state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class SpaceSpec:
    """Discrete state space [K]^D."""

    vocab_size: int
    seq_len: int

    def __post_init__(self):
        if self.vocab_size < 2:
            raise DomainError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.seq_len < 1:
            raise DomainError(f"seq_len must be >= 1, got {self.seq_len}")

    def validate(self, x: np.ndarray) -> np.ndarray:
        """Return ``x`` as an int64 array after checking length and range."""
        x = np.asarray(x)
        if x.shape[-1:] != (self.seq_len,):
            raise ShapeError(f"expected sequences of length {self.seq_len}, got shape {x.shape}")
        if not np.issubdtype(x.dtype, np.integer):
            raise DomainError("token ids must be integers")
        if x.size and (x.min() < 0 or x.max() >= self.vocab_size):
            raise DomainError(f"token ids must lie in [0, {self.vocab_size})")
        return x.astype(np.int64, copy=False)

    def sample_source(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        """Draw from p_0 = Unif([K])^D."""
        shape = (self.seq_len,) if n is None else (n, self.seq_len)
        return rng.integers(0, self.vocab_size, size=shape, dtype=np.int64)


class NoiseSchedule:
    """kappa(t): probability that a token still carries the clean value's identity."""

    name = "base"

    def kappa(self, t):
        raise NotImplementedError

    def kappa_dot(self, t):
        raise NotImplementedError


class LinearSchedule(NoiseSchedule):
    name = "linear"

    def kappa(self, t):
        return np.asarray(t, dtype=np.float64) * 1.0

    def kappa_dot(self, t):
        return np.ones_like(np.asarray(t, dtype=np.float64))


class CosineSchedule(NoiseSchedule):
    """kappa(t) = 1 - cos(pi t / 2)."""

    name = "cosine"

    def kappa(self, t):
        return 1.0 - np.cos(0.5 * np.pi * np.asarray(t, dtype=np.float64))

    def kappa_dot(self, t):
        return 0.5 * np.pi * np.sin(0.5 * np.pi * np.asarray(t, dtype=np.float64))


SCHEDULES = {"linear": LinearSchedule, "cosine": CosineSchedule}


def make_schedule(name: str) -> NoiseSchedule:
    try:
        return SCHEDULES[name]()
    except KeyError:
        raise DomainError(f"unknown schedule {name!r}; choose from {sorted(SCHEDULES)}") from None


@dataclass(frozen=True)
class TimeGrid:
    """Knots 0 = t_0 < t_1 < ... < t_T = 1."""

    knots: tuple[float, ...]

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=np.float64)
        if k.ndim != 1 or k.size < 2:
            raise DomainError("a time grid needs at least two knots")
        if k[0] != 0.0 or k[-1] != 1.0:
            raise DomainError("time grid must start at 0 and end at 1")
        if np.any(np.diff(k) <= 0):
            raise DomainError("time grid knots must be strictly increasing")

    @classmethod
    def uniform(cls, num_steps: int) -> "TimeGrid":
        if num_steps < 1:
            raise DomainError(f"num_steps must be >= 1, got {num_steps}")
        knots = [j / num_steps for j in range(num_steps)] + [1.0]
        return cls(tuple(knots))

    @property
    def num_steps(self) -> int:
        return len(self.knots) - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(np.asarray(self.knots, dtype=np.float64))

    def t(self, j: int) -> float:
        return self.knots[j]

    def dt(self, j: int) -> float:
        return self.knots[j + 1] - self.knots[j]


def _check_time(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError(f"t must lie in [0, 1], got {t}")
    return t


def forward_corrupt(
    x1: np.ndarray,
    t,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    vocab_size: int,
) -> np.ndarray:
    """Sample x_t ~ p_t(. | x1).

    Each position keeps ``x1`` with probability kappa(t) and is otherwise
    replaced by a uniform token (which may coincide with ``x1``). ``t`` may be
    a scalar or one value per leading row of ``x1``.
    """
    x1 = np.asarray(x1, dtype=np.int64)
    t = _check_time(t)
    kappa = schedule.kappa(t)
    if kappa.ndim:
        kappa = kappa.reshape(kappa.shape + (1,) * (x1.ndim - kappa.ndim))
    keep = rng.random(x1.shape) < kappa
    noise = rng.integers(0, vocab_size, size=x1.shape, dtype=np.int64)
    return np.where(keep, x1, noise)


def forward_marginal_prob(x1_tok: int, x_tok: int, t: float, schedule: NoiseSchedule, vocab_size: int) -> float:
    """Per-token factor of p_t(x | x1): kappa [x == x1] + (1 - kappa) / K."""
    for tok in (x1_tok, x_tok):
        if not 0 <= tok < vocab_size:
            raise DomainError(f"token id {tok} outside [0, {vocab_size})")
    kappa = float(schedule.kappa(_check_time(t)))
    return kappa * (x1_tok == x_tok) + (1.0 - kappa) / vocab_size


def jump_probability(t: float, dt: float, schedule: NoiseSchedule) -> float:
    """Probability that a disagreeing token jumps to the prediction over [t, t+dt]."""
    if t >= 1.0:
        raise DomainError("jump probability is undefined at t = 1")
    if t < 0.0 or dt < 0.0 or t + dt > 1.0 + 1e-12:
        raise DomainError(f"invalid step t={t}, dt={dt}")
    if dt == 0.0:
        return 0.0
    lam = dt * float(schedule.kappa_dot(t)) / (1.0 - float(schedule.kappa(t)))
    return min(max(lam, 0.0), 1.0)


def euler_step(
    x_t: np.ndarray,
    x1_pred: np.ndarray,
    t: float,
    dt: float,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """One step of the parameter-free jump rule from t to t + dt.

    A position whose token differs from ``x1_pred`` jumps onto the prediction
    with probability ``jump_probability(t, dt)``; agreeing positions stay.
    """
    jump_prob = jump_probability(t, dt, schedule)
    x_t = np.asarray(x_t, dtype=np.int64)
    x1_pred = np.asarray(x1_pred, dtype=np.int64)
    if x_t.shape != x1_pred.shape:
        raise ShapeError(f"state shape {x_t.shape} != prediction shape {x1_pred.shape}")
    jump = rng.random(x_t.shape) < jump_prob
    return np.where(jump & (x_t != x1_pred), x1_pred, x_t)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def gather_tokens(table: np.ndarray, target: np.ndarray) -> np.ndarray:
    """table[..., l, target[..., l]] for every position."""
    return np.take_along_axis(table, np.asarray(target, dtype=np.int64)[..., None], axis=-1)[..., 0]


def sequence_log_prob(field: np.ndarray, target: np.ndarray) -> float | np.ndarray:
    """Sum over positions of log field[l, target[l]].

    Probabilities below ``PROB_FLOOR`` are clamped before the log, except exact
    zeros, which yield ``-inf`` rather than a large finite number.
    """
    field = np.asarray(field, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    if field.shape[:-1] != target.shape:
        raise ShapeError(f"field shape {field.shape} does not match target shape {target.shape}")
    p = gather_tokens(field, target)
    with np.errstate(divide="ignore"):
        logs = np.where(p == 0.0, -np.inf, np.log(np.maximum(p, PROB_FLOOR)))
    out = logs.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def sample_categorical(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling of one token per row of ``probs`` from given uniforms."""
    cdf = np.cumsum(probs, axis=-1)
    # "<=" skips leading zero-mass tokens when u == 0
    idx = (cdf <= uniforms[..., None] * cdf[..., -1:]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1).astype(np.int64)


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    """Natural-log entropy of each categorical row."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(np.maximum(probs, PROB_FLOOR)), 0.0)
    return -terms.sum(axis=-1)


def is_normalized(field: np.ndarray, tol: float = 1e-9) -> bool:
    field = np.asarray(field)
    return bool(np.all(field >= 0) and np.all(np.abs(field.sum(axis=-1) - 1.0) <= tol))

"""Small conditional denoiser with hand-written reverse-mode gradients.

The network maps (x_t, t, prompt) to per-position logits over the vocabulary:

    h   = tok[x_t] + pos + time_features(t) @ W_time + prompt[c]
    per block:  h = h + W2 tanh(W1 (h + mean_l h) + b1) + b2
    out = h @ W_head + b_head

The mean over positions gives every position a view of the whole sequence;
``prompt`` has one extra row used as the unconditional (NULL) condition.
All arithmetic is float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .core import gather_tokens, log_softmax
from .errors import CheckpointMismatch, DomainError, NumericError, ShapeError

CHECKPOINT_MAGIC = b"UDMG"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Arch:
    vocab_size: int
    seq_len: int
    num_prompts: int
    embed_dim: int = 32
    hidden_dim: int = 64
    num_blocks: int = 2
    time_dim: int = 8

    def __post_init__(self):
        if self.time_dim % 2:
            raise DomainError("time_dim must be even")
        for name in ("vocab_size", "seq_len", "num_prompts", "embed_dim", "hidden_dim", "num_blocks", "time_dim"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")

    @property
    def null_cond(self) -> int:
        return self.num_prompts

    def as_ints(self) -> tuple[int, ...]:
        return (self.vocab_size, self.seq_len, self.num_prompts, self.embed_dim,
                self.hidden_dim, self.num_blocks, self.time_dim)

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        K, D, P, E, H, F = (self.vocab_size, self.seq_len, self.num_prompts,
                            self.embed_dim, self.hidden_dim, self.time_dim)
        out = [("tok", (K, E)), ("pos", (D, E)), ("prompt", (P + 1, E)), ("time_w", (F, E))]
        for b in range(self.num_blocks):
            out += [(f"w1_{b}", (E, H)), (f"b1_{b}", (H,)), (f"w2_{b}", (H, E)), (f"b2_{b}", (E,))]
        out += [("head_w", (E, K)), ("head_b", (K,))]
        return out

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes())


@dataclass
class ModelParams:
    values: np.ndarray
    arch: Arch

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.arch.num_params,):
            raise ShapeError(f"expected {self.arch.num_params} parameters, got {self.values.shape}")

    def copy(self) -> "ModelParams":
        return ModelParams(self.values.copy(), self.arch)

    def tensors(self) -> dict[str, np.ndarray]:
        return unpack(self.values, self.arch)


def unpack(flat: np.ndarray, arch: Arch) -> dict[str, np.ndarray]:
    """Named views into a flat parameter (or gradient) vector."""
    out, off = {}, 0
    for name, shape in arch.shapes():
        n = int(np.prod(shape))
        out[name] = flat[off:off + n].reshape(shape)
        off += n
    return out


def init_params(arch: Arch, rng: np.random.Generator, scale: float = 0.05) -> ModelParams:
    return ModelParams(rng.uniform(-scale, scale, size=arch.num_params), arch)


def zero_params(arch: Arch) -> ModelParams:
    return ModelParams(np.zeros(arch.num_params), arch)


def time_features(t: np.ndarray, dim: int) -> np.ndarray:
    freqs = 0.5 * np.pi * 2.0 ** np.arange(dim // 2)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DenoiserInput:
    """One model query; ``cond=None`` selects the unconditional branch."""

    x_t: np.ndarray
    t: float
    cond: int | None


def _prepare(arch: Arch, x, t, cond):
    x = np.asarray(x, dtype=np.int64)
    if x.ndim == 1:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != arch.seq_len:
        raise ShapeError(f"expected (N, {arch.seq_len}) tokens, got {x.shape}")
    if x.size and (x.min() < 0 or x.max() >= arch.vocab_size):
        raise DomainError(f"token ids must lie in [0, {arch.vocab_size})")
    n = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    if np.any(t < 0) or np.any(t > 1):
        raise DomainError("t must lie in [0, 1]")
    if cond is None:
        cond = arch.null_cond
    cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,))
    if np.any(cond < 0) or np.any(cond > arch.null_cond):
        raise DomainError(f"prompt ids must lie in [0, {arch.num_prompts}) or be NULL")
    return x, t, cond


def forward_batch(params: ModelParams, x, t, cond, keep_cache: bool = False):
    """Logits of shape (N, D, K); with ``keep_cache`` also the activations for backprop.

    ``cond`` entries equal to ``arch.null_cond`` (or ``None`` for all) use the
    unconditional embedding.
    """
    arch = params.arch
    x, t, cond = _prepare(arch, x, t, cond)
    p = params.tensors()
    tf = time_features(t, arch.time_dim)
    h = p["tok"][x] + p["pos"][None] + (tf @ p["time_w"] + p["prompt"][cond])[:, None, :]
    blocks = []
    for b in range(arch.num_blocks):
        u = h + h.mean(axis=1, keepdims=True)
        g = np.tanh(u @ p[f"w1_{b}"] + p[f"b1_{b}"])
        blocks.append((u, g))
        h = h + g @ p[f"w2_{b}"] + p[f"b2_{b}"]
    logits = h @ p["head_w"] + p["head_b"]
    if keep_cache:
        return logits, (x, cond, tf, blocks, h)
    return logits


def backward_batch(params: ModelParams, cache, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of sum(dlogits * logits) w.r.t. the flat parameter vector."""
    arch = params.arch
    x, cond, tf, blocks, h = cache
    p = params.tensors()
    grad = np.zeros_like(params.values)
    g_ = unpack(grad, arch)
    D = arch.seq_len

    g_["head_w"][...] = np.einsum("nde,ndk->ek", h, dlogits)
    g_["head_b"][...] = dlogits.sum(axis=(0, 1))
    dh = dlogits @ p["head_w"].T
    for b in reversed(range(arch.num_blocks)):
        u, g = blocks[b]
        g_[f"w2_{b}"][...] = np.einsum("ndh,nde->he", g, dh)
        g_[f"b2_{b}"][...] = dh.sum(axis=(0, 1))
        da = (dh @ p[f"w2_{b}"].T) * (1.0 - g * g)
        g_[f"w1_{b}"][...] = np.einsum("nde,ndh->eh", u, da)
        g_[f"b1_{b}"][...] = da.sum(axis=(0, 1))
        du = da @ p[f"w1_{b}"].T
        dh = dh + du + du.sum(axis=1, keepdims=True) / D
    np.add.at(g_["tok"], x, dh)
    g_["pos"][...] = dh.sum(axis=0)
    dctx = dh.sum(axis=1)
    g_["time_w"][...] = tf.T @ dctx
    np.add.at(g_["prompt"], cond, dctx)
    return grad


def forward_logits(params: ModelParams, inp: DenoiserInput) -> np.ndarray:
    """D x K logits for a single query."""
    return forward_batch(params, inp.x_t, inp.t, inp.cond)[0]


def cfg_combine(cond_logits: np.ndarray, uncond_logits: np.ndarray, w: float) -> np.ndarray:
    """Guided logits ``uncond + w (cond - uncond)``.

    Evaluated as ``w cond + (1 - w) uncond``, which returns either input
    bit-exactly at w = 1 and w = 0.
    """
    cond_logits = np.asarray(cond_logits)
    uncond_logits = np.asarray(uncond_logits)
    if cond_logits.shape != uncond_logits.shape:
        raise ShapeError(f"logit shapes differ: {cond_logits.shape} vs {uncond_logits.shape}")
    return w * cond_logits + (1.0 - w) * uncond_logits


def policy_logits(params: ModelParams, x, t, cond, guidance: float | None = None) -> np.ndarray:
    """Conditional logits, or CFG-guided logits when ``guidance`` is given."""
    if guidance is None:
        return forward_batch(params, x, t, cond)
    x = np.asarray(x, dtype=np.int64)
    if x.ndim == 1:
        x = x[None]
    n = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,))
    null = np.full(n, params.arch.null_cond)
    both = forward_batch(params, np.concatenate([x, x]), np.concatenate([t, t]), np.concatenate([cond, null]))
    return cfg_combine(both[:n], both[n:], guidance)


@dataclass
class LossBatch:
    """Arrays describing N weighted loss items."""

    x: np.ndarray
    t: np.ndarray
    cond: np.ndarray
    actions: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_items(cls, items, null_cond: int) -> "LossBatch":
        """Build from ``(DenoiserInput, action, weight)`` triples."""
        items = list(items)
        return cls(
            x=np.stack([np.asarray(i.x_t, dtype=np.int64) for i, _, _ in items]),
            t=np.array([i.t for i, _, _ in items], dtype=np.float64),
            cond=np.array([null_cond if i.cond is None else i.cond for i, _, _ in items], dtype=np.int64),
            actions=np.stack([np.asarray(a, dtype=np.int64) for _, a, _ in items]),
            weights=np.array([w for _, _, w in items], dtype=np.float64),
        )

    def __len__(self) -> int:
        return len(self.weights)


@dataclass
class LossSpec:
    """Which loss to evaluate, plus the per-item data the GRPO surrogate needs.

    For ``cross_entropy`` only ``kind`` is used. For ``grpo_surrogate`` each
    item contributes ``-min(r A, clip(r, 1-eps, 1+eps) A) + kl_weight * KL``
    where ``r = exp(log p_theta(action) - old_logprob)`` and ``KL`` is the
    position-averaged KL to ``ref_logprobs``. ``guidance`` switches the policy
    field to CFG-guided logits; ``cfg_grad="conditional"`` then treats the
    unconditional branch as a constant.
    """

    kind: str = "cross_entropy"
    advantages: np.ndarray | None = None
    old_logprob: np.ndarray | None = None
    ref_logprobs: np.ndarray | None = None
    clip_eps: float = 0.2
    kl_weight: float = 0.0
    guidance: float | None = None
    cfg_grad: str = "guided"
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("cross_entropy", "grpo_surrogate"):
            raise DomainError(f"unknown loss kind {self.kind!r}")
        if self.cfg_grad not in ("guided", "conditional"):
            raise DomainError(f"unknown cfg_grad {self.cfg_grad!r}")


def _check_finite(arr: np.ndarray, what: str):
    bad = ~np.isfinite(arr)
    if np.any(bad):
        idx = int(np.argwhere(bad.reshape(len(arr), -1).any(axis=1))[0, 0])
        raise NumericError(f"non-finite {what}", index=idx)


def loss_and_grad(params: ModelParams, batch: LossBatch, spec: LossSpec) -> tuple[float, np.ndarray]:
    """Weighted loss ``sum_i w_i * loss_i`` and its exact gradient.

    After a ``grpo_surrogate`` call ``spec.stats`` holds per-item ``ratio``,
    ``clipped`` and ``kl`` arrays.
    """
    if len(batch) == 0:
        raise DomainError("empty batch")
    n = len(batch)
    w = np.asarray(batch.weights, dtype=np.float64)
    guided = spec.guidance is not None
    if guided:
        null = np.full(n, params.arch.null_cond)
        raw, cache = forward_batch(params, np.concatenate([batch.x, batch.x]),
                                   np.concatenate([batch.t, batch.t]),
                                   np.concatenate([batch.cond, null]), keep_cache=True)
        logits = cfg_combine(raw[:n], raw[n:], spec.guidance)
    else:
        logits, cache = forward_batch(params, batch.x, batch.t, batch.cond, keep_cache=True)
    _check_finite(logits, "logits")
    logp = log_softmax(logits)
    probs = np.exp(logp)
    onehot = np.zeros_like(logp)
    np.put_along_axis(onehot, batch.actions[..., None], 1.0, axis=-1)
    seq_logp = gather_tokens(logp, batch.actions).sum(axis=-1)

    if spec.kind == "cross_entropy":
        item_loss = -seq_logp
        # d(-log p)/dlogits = softmax - onehot
        dlogits = (probs - onehot) * w[:, None, None]
    else:
        A = np.asarray(spec.advantages, dtype=np.float64)
        eps = spec.clip_eps
        ratio = np.exp(seq_logp - np.asarray(spec.old_logprob, dtype=np.float64))
        _check_finite(ratio, "policy ratio")
        unclipped = ratio * A
        clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * A
        surrogate = np.minimum(unclipped, clipped)
        # gradient flows only when the unclipped branch attains the min
        active = unclipped <= clipped
        d_ratio = np.where(active, -A, 0.0)
        dlogits = (d_ratio * ratio)[:, None, None] * (onehot - probs)

        ref = np.asarray(spec.ref_logprobs, dtype=np.float64)
        diff = logp - ref
        kl_pos = (probs * diff).sum(axis=-1)
        kl = kl_pos.mean(axis=-1)
        D = logp.shape[1]
        dlogits = dlogits + spec.kl_weight * probs * (diff - kl_pos[..., None]) / D
        dlogits = dlogits * w[:, None, None]
        item_loss = -surrogate + spec.kl_weight * kl
        spec.stats = {"ratio": ratio, "clipped": ~active, "kl": kl}

    _check_finite(item_loss, "loss")
    loss = float(np.dot(w, item_loss))
    if guided:
        g = spec.guidance
        d_uncond = np.zeros_like(dlogits) if spec.cfg_grad == "conditional" else (1.0 - g) * dlogits
        grad = backward_batch(params, cache, np.concatenate([g * dlogits, d_uncond]))
    else:
        grad = backward_batch(params, cache, dlogits)
    _check_finite(grad[None], "gradient")
    return loss, grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adamw_step(
    params: ModelParams,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    weight_decay: float = 0.01,
    eps: float = 1e-8,
) -> tuple[ModelParams, AdamState]:
    """Adam with decoupled weight decay; returns new params and moments."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {params.values.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient passed to optimizer")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    values = params.values * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return ModelParams(values, params.arch), AdamState(m, v, step)


def save_checkpoint(path, params: ModelParams) -> None:
    arch_ints = params.arch.as_ints()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arch_ints)))
        fh.write(struct.pack(f"<{len(arch_ints)}q", *arch_ints))
        fh.write(struct.pack("<Q", params.values.size))
        fh.write(params.values.astype("<f8").tobytes())


def load_checkpoint(path, expect: Arch | None = None) -> ModelParams:
    """Read a checkpoint; raises CheckpointMismatch on bad format or architecture."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointMismatch(f"{path}: not a UDMG checkpoint")
    try:
        version, n_arch = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointMismatch(f"{path}: unsupported checkpoint version {version}")
        off = 12
        arch_ints = struct.unpack_from(f"<{n_arch}q", data, off)
        off += 8 * n_arch
        (n,) = struct.unpack_from("<Q", data, off)
        off += 8
        arch = Arch(*arch_ints)
    except (struct.error, TypeError, DomainError) as exc:
        raise CheckpointMismatch(f"{path}: corrupt header ({exc})") from None
    if len(data) - off != 8 * n or n != arch.num_params:
        raise CheckpointMismatch(f"{path}: parameter block has wrong size")
    values = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64)
    if expect is not None and expect != arch:
        raise CheckpointMismatch(f"{path}: architecture {arch} does not match expected {expect}")
    return ModelParams(values, arch)

"""Hierarchical random-stream derivation.

Every random draw in a run descends from one 64-bit master seed. A stream is
addressed by a path of labels, e.g. ``("rl", update, "group", g, "rollout", i)``,
so two runs that share a seed see identical rollouts at identical addresses
regardless of which training variant consumes them.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK32 = 0xFFFFFFFF


def _label_to_int(label: int | str) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8")) & _MASK32
    if label < 0:
        raise ValueError(f"stream labels must be non-negative, got {label}")
    return int(label)


def stream(seed: int, *path: int | str) -> np.random.Generator:
    """Return an independent generator for ``path`` under ``seed``."""
    key = tuple(_label_to_int(p) for p in path)
    ss = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def child_seed(seed: int, *path: int | str) -> int:
    """Derive a 64-bit integer seed for ``path``; useful when a seed must be stored."""
    key = tuple(_label_to_int(p) for p in path)
    ss = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1), spawn_key=key)
    return int(ss.generate_state(1, dtype=np.uint64)[0])

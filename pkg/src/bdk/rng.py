"""Seed handling.

All randomness descends from one integer seed. Independent streams are
derived with ``numpy.random.SeedSequence`` keyed by ``(seed, *path)``, so a
stream for sample ``i`` of purpose ``"tail"`` is the same regardless of how
many other samples exist or in which order a batch is processed.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

# stable integer tags for named purposes
_PURPOSES = {
    "data": 1,
    "init": 2,
    "train": 3,
    "start": 4,
    "tail": 5,
    "split": 6,
    "svm": 7,
    "probe": 8,
    "pairs": 9,
}

RngLike = Union[np.random.Generator, Sequence[np.random.Generator]]


def _key(seed: int, path: Sequence) -> list[int]:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for p in path:
        key.append(_PURPOSES[p] if isinstance(p, str) else int(p))
    return key


def stream(seed: int, *path) -> np.random.Generator:
    """One generator for ``(seed, *path)``; string parts name a purpose."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(_key(seed, path))))


def sample_streams(seed: int, n: int, *path) -> list[np.random.Generator]:
    """Per-sample generators ``stream(seed, *path, i)`` for ``i < n``."""
    return [stream(seed, *path, i) for i in range(n)]


def standard_normal(rng: RngLike, shape: tuple[int, ...]) -> np.ndarray:
    """Draw normals; with a list of generators, row ``i`` comes from ``rng[i]``."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    if len(shape) != 2 or len(rng) != shape[0]:
        raise ValueError(f"need one generator per row: {len(rng)} streams for shape {shape}")
    return np.stack([g.standard_normal(shape[1]) for g in rng])

"""Counter-based random streams and order-preserving chunk execution.

Every random draw in the package comes from a Philox generator keyed by
``(seed, purpose, chunk)``. A chunk's stream depends only on those three
values, so outputs are identical for any worker count as long as the chunk
size is unchanged.
"""
from __future__ import annotations

import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

DEFAULT_CHUNK = 8192


def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode("ascii"))


def stream(seed: int, purpose: str, chunk: int = 0) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=(_tag(purpose), int(chunk)))
    return np.random.Generator(np.random.Philox(seq))


def chunk_bounds(n: int, size: int) -> list[tuple[int, int, int]]:
    """``(index, start, stop)`` triples covering ``range(n)``."""
    if size < 1:
        raise ValueError(f"chunk size must be positive, got {size}")
    return [(k, a, min(a + size, n)) for k, a in enumerate(range(0, n, size))]


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        return os.cpu_count() or 1
    if workers < 1:
        raise ValueError(f"workers must be positive, got {workers}")
    return workers


def map_ordered(fn, items, workers: int | None = None) -> list:
    """``[fn(x) for x in items]``, optionally on a thread pool; order preserved."""
    items = list(items)
    w = min(resolve_workers(workers), max(len(items), 1))
    if w == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=w) as pool:
        return list(pool.map(fn, items))


def fsum_arrays(parts: list[np.ndarray]) -> np.ndarray:
    """Elementwise correctly rounded sum of equally shaped arrays."""
    stacked = np.stack([np.asarray(p, dtype=np.float64) for p in parts])
    flat = stacked.reshape(len(parts), -1)
    out = np.array([math.fsum(col) for col in flat.T])
    return out.reshape(stacked.shape[1:])

"""Deterministic intra-process parallelism.

Heavy kernels split their work into fixed-size chunks and may evaluate the
chunks on a thread pool. Chunk boundaries never depend on the thread count
and partial results are combined in chunk order (pairwise tree reduction
for sums), so results are bit-identical for any worker count. numpy
releases the GIL inside its C kernels, which is where the speedup comes
from.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np

THREADS_ENV_VAR = "SHAPLEY_SELECT_THREADS"

_num_threads = 1

T = TypeVar("T")


def set_num_threads(n: int) -> None:
    global _num_threads
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _num_threads = int(n)


def get_num_threads() -> int:
    return _num_threads


def threads_from_env(default: int = 1) -> int:
    """Resolve the worker count from the environment, falling back to `default`."""
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError:
        return default
    return max(1, n)


def chunk_ranges(n_items: int, chunk_size: int) -> list[tuple[int, int]]:
    """Fixed [start, stop) chunk boundaries; independent of the thread count."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    return [(s, min(s + chunk_size, n_items)) for s in range(0, n_items, chunk_size)]


def map_chunks(
    fn: Callable[[int, int], T],
    n_items: int,
    chunk_size: int,
) -> list[T]:
    """Apply `fn(start, stop)` to every chunk, returning results in chunk order.

    Runs on the module-level thread pool size; single-threaded execution is
    the plain loop, so both paths produce identical output.
    """
    ranges = chunk_ranges(n_items, chunk_size)
    workers = min(_num_threads, len(ranges)) or 1
    if workers <= 1:
        return [fn(s, e) for s, e in ranges]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, s, e) for s, e in ranges]
        return [f.result() for f in futures]


def tree_sum(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise tree reduction of a list of equally shaped arrays.

    The reduction order depends only on len(parts), never on how the parts
    were produced, which keeps chunked accumulation reproducible.
    """
    if len(parts) == 0:
        raise ValueError("tree_sum of an empty sequence")
    level = list(parts)
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level) - 1, 2):
            nxt.append(level[i] + level[i + 1])
        if len(level) % 2 == 1:
            nxt.append(level[-1])
        level = nxt
    return level[0]

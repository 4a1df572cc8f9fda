"""Deterministic work splitting for the data-parallel sites.

Batches are fixed by index, never by thread count, so results are
bit-identical no matter how many workers consume them.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence


def split_batches(n: int, n_batches: int) -> list[tuple[int, int]]:
    """[lo, hi) index ranges; layout depends only on (n, n_batches)."""
    n_batches = max(1, min(n_batches, n))
    edges = [round(i * n / n_batches) for i in range(n_batches + 1)]
    return [(edges[i], edges[i + 1]) for i in range(n_batches)
            if edges[i + 1] > edges[i]]


def pmap_batches(fn: Callable, batches: Sequence, threads: int = 1) -> list:
    """Map fn over batches, in order; thread pool only when threads > 1."""
    if threads is None or threads <= 1 or len(batches) <= 1:
        return [fn(b) for b in batches]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, batches))

"""Deterministic worker-pool helper.

Work items are pure functions of their index, results are written back by
index, so the output is byte-identical for any thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

__all__ = ["parallel_map"]


def parallel_map(fn, items, threads: int = 1) -> list:
    """Apply ``fn`` to every item; results keep the input order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    results = [None] * len(items)

    def run(i):
        results[i] = fn(items[i])

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(run, range(len(items))))
    return results

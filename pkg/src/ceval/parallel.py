"""Order-preserving bounded process pool."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1


def parallel_map(fn, items, workers: int | None = 1) -> list:
    """``[fn(item) for item in items]``, fanned out over ``workers`` processes.

    ``fn`` must be a module-level function. Results keep the input order, so
    the merge is deterministic regardless of completion order.
    """
    items = list(items)
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))

"""Order-preserving worker pool for per-block computations.

Worker count is capped by the SPARSITY_FORGE_THREADS environment variable.
Results come back in input order, so callers stay bit-reproducible no matter
how many threads run.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def worker_count() -> int:
    env = os.environ.get("SPARSITY_FORGE_THREADS", "")
    if env.strip():
        try:
            return max(1, int(env))
        except ValueError:
            return 1
    return min(8, os.cpu_count() or 1)


def ordered_map(fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
    work: Sequence[T] = list(items)
    n = worker_count()
    if n <= 1 or len(work) <= 1:
        return [fn(x) for x in work]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, work))

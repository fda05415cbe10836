"""Deterministic summary statistics and k-smallest selection.

These kernels back every scoring and masking path, so they are pinned down
hard: median/selection use introselect partitioning but are guaranteed to
match a full sort, ties in selection always break toward the smaller flat
index, and reductions accumulate in float64 with numpy's fixed pairwise
order so results do not depend on input chunking or thread count.
"""

import enum
import math
from typing import Iterable, Union

import numpy as np

from .errors import EmptyInput, KOutOfRange, NonFinite

ArrayLike = Union[np.ndarray, Iterable[float]]


class Aggregator(enum.Enum):
    SUM = "sum"
    MEAN = "mean"
    MEDIAN = "median"
    MAX = "max"
    VAR = "var"
    SD = "sd"


def as_finite_f32(values: ArrayLike, what: str = "values") -> np.ndarray:
    """Coerce to a flat float32 vector, rejecting NaN/Inf."""
    arr = np.asarray(values, dtype=np.float32).ravel()
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{what} contain NaN or Inf")
    return arr


def aggregate(values: ArrayLike, kind: Aggregator) -> float:
    """Apply one of the six summary statistics to a finite float32 vector.

    Median of an even-length input is the mean of the two middle order
    statistics; Var/SD are population statistics (divide by n).
    """
    v = as_finite_f32(values)
    n = v.size
    if n == 0:
        raise EmptyInput("aggregate requires at least one value")
    if kind is Aggregator.MAX:
        return float(v.max())
    if kind is Aggregator.MEDIAN:
        return _median(v)
    x = v.astype(np.float64)
    if kind is Aggregator.SUM:
        return float(x.sum())
    if kind is Aggregator.MEAN:
        return float(x.mean())
    mu = x.mean()
    var = float(np.mean((x - mu) ** 2))
    if kind is Aggregator.VAR:
        return var
    if kind is Aggregator.SD:
        return math.sqrt(var)
    raise ValueError(f"unknown aggregator {kind!r}")


def _median(v: np.ndarray) -> float:
    n = v.size
    mid = n // 2
    if n % 2:
        return float(np.partition(v, mid)[mid])
    part = np.partition(v, [mid - 1, mid])
    return (float(part[mid - 1]) + float(part[mid])) / 2.0


def rank_smallest(scores: ArrayLike, k: int) -> np.ndarray:
    """Indices of the k smallest scores, ascending.

    Ties at the selection boundary break toward the smaller flat index, so
    the selected set is identical to sorting by (value, index) and taking
    the first k, regardless of how the partition kernel orders equal keys.
    """
    v = as_finite_f32(scores, "scores")
    n = v.size
    if k < 0 or k > n:
        raise KOutOfRange(f"k={k} outside [0, {n}]")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if k == n:
        return np.arange(n, dtype=np.int64)
    pivot = np.partition(v, k - 1)[k - 1]
    below = np.flatnonzero(v < pivot)
    at = np.flatnonzero(v == pivot)
    need = k - below.size
    sel = np.concatenate([below, at[:need]])
    sel.sort()
    return sel.astype(np.int64)

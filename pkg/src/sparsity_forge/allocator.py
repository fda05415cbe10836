"""Per-unit sparsity allocation from importance (or outlier) vectors.

The dynamic allocator min-max normalizes importance into deflation values
d in [0, 2*alpha], then assigns R = p + mean(d) - d and clamps to [0, 1].
The pre-clamp mean is exactly the target p. Baselines: uniform, ER and
ER-Plus (dimension-driven with an iterative budget solve), an OWL-style
allocator that feeds the outlier share through the same scale-shift, and a
mixed N:M scheme with greedy residual repair.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .errors import InfeasibleBudget, InvalidConfig
from .importance import ImportanceVector
from .model_io import PER_LAYER, Allocation, Model

# Tuned deflation scale per target sparsity (10% .. 80%), nearest level wins.
ALPHA_TABLE = {
    0.1: 0.06,
    0.2: 0.02,
    0.3: 0.04,
    0.4: 0.02,
    0.5: 0.04,
    0.6: 0.10,
    0.7: 0.15,
    0.8: 0.12,
}


def default_alpha(target_sparsity: float) -> float:
    """Deflation scale for the nearest tabulated sparsity level."""
    levels = sorted(ALPHA_TABLE)
    nearest = min(levels, key=lambda s: (abs(s - target_sparsity), -s))
    return ALPHA_TABLE[nearest]


@dataclass
class DlpConfig:
    target_sparsity: float
    alpha: float

    def __post_init__(self):
        if not (0.0 <= self.target_sparsity <= 1.0):
            raise InvalidConfig(f"target sparsity {self.target_sparsity} outside [0, 1]")
        if self.alpha < 0:
            raise InvalidConfig(f"alpha {self.alpha} must be >= 0")


@dataclass
class NMScheme:
    m: int  # group size along the input dimension
    per_layer_n: List[int]  # kept weights per group, one per unit
    units: List[str]
    granularity: str = PER_LAYER

    def keep_ratio(self) -> float:
        return float(np.mean([n / self.m for n in self.per_layer_n]))


def _scale_shift(values: np.ndarray, p: float, alpha: float) -> np.ndarray:
    """Core of the dynamic allocator: R = p + mean(d) - d, d = minmax(v) * 2a."""
    vmin, vmax = float(values.min()), float(values.max())
    if vmax == vmin:
        d = np.full(values.shape, alpha, dtype=np.float64)
    else:
        d = (values - vmin) / (vmax - vmin) * (2.0 * alpha)
    m = float(np.mean(d))
    return p + m - d


def dlp_allocate(imp: ImportanceVector, cfg: DlpConfig, metadata: Optional[dict] = None) -> Allocation:
    """Assign higher sparsity to less important units, preserving mean p."""
    if not imp.units:
        raise InvalidConfig("importance vector has no units")
    raw = _scale_shift(imp.values.astype(np.float64), cfg.target_sparsity, cfg.alpha)
    clamped = np.clip(raw, 0.0, 1.0)
    meta = {
        "allocator": "dlp",
        "target_sparsity": cfg.target_sparsity,
        "alpha": cfg.alpha,
    }
    if metadata:
        meta.update(metadata)
    return Allocation(
        granularity=imp.granularity,
        entries={u: float(r) for u, r in zip(imp.units, clamped)},
        importance={u: float(v) for u, v in zip(imp.units, imp.values)},
        metadata=meta,
    )


def uniform_allocate(model: Model, p: float, granularity: str = PER_LAYER) -> Allocation:
    if not (0.0 <= p <= 1.0):
        raise InvalidConfig(f"target sparsity {p} outside [0, 1]")
    units = model.unit_ids(granularity)
    return Allocation(
        granularity=granularity,
        entries={u: float(p) for u in units},
        importance={},
        metadata={"allocator": "uniform", "target_sparsity": p},
    )


def owl_allocate(
    lod: Dict[str, float],
    p: float,
    alpha: float,
    granularity: str = PER_LAYER,
) -> Allocation:
    """Outlier-share-driven allocation: higher share means lower sparsity.

    The per-unit outlier fraction plays the role of the importance vector in
    the same scale-shift used by the dynamic allocator.
    """
    if not lod:
        raise InvalidConfig("empty outlier-share vector")
    units = list(lod)
    d = np.asarray([lod[u] for u in units], dtype=np.float64)
    if np.any(d < 0) or np.any(d > 1):
        raise InvalidConfig("outlier shares must lie in [0, 1]")
    raw = _scale_shift(d, p, alpha)
    clamped = np.clip(raw, 0.0, 1.0)
    return Allocation(
        granularity=granularity,
        entries={u: float(r) for u, r in zip(units, clamped)},
        importance={u: float(v) for u, v in zip(units, d)},
        metadata={"allocator": "owl", "target_sparsity": p, "alpha": alpha},
    )


def er_allocate(model: Model, p: float, plus_variant: bool = False) -> Allocation:
    """Dimension-driven sparsity, solved to hit the global parameter budget.

    raw_l = 1 - (c_in + c_out) / (c_in * c_out); a common factor gamma is
    rescaled iteratively as entries clamp at 0 or 1 until the kept-parameter
    budget holds within one weight. The plus variant keeps the final layer
    dense before solving.
    """
    if not (0.0 <= p <= 1.0):
        raise InvalidConfig(f"target sparsity {p} outside [0, 1]")
    units = model.unit_ids(PER_LAYER)
    numels = np.array(
        [sum(b.numel for b in layer.blocks) for layer in model.layers], dtype=np.float64
    )
    raws = np.array([_er_raw(layer) for layer in model.layers], dtype=np.float64)
    n = len(units)
    total = float(numels.sum())
    budget = p * total  # weights to remove

    r = np.zeros(n, dtype=np.float64)
    fixed = np.zeros(n, dtype=bool)
    if plus_variant and n > 0:
        fixed[-1] = True
        r[-1] = 0.0

    for _ in range(n + 1):
        free = ~fixed
        removed_fixed = float(np.sum(r[fixed] * numels[fixed]))
        denom = float(np.sum(raws[free] * numels[free]))
        remaining = budget - removed_fixed
        if not np.any(free):
            if abs(removed_fixed - budget) <= 1.0:
                break
            raise InfeasibleBudget(
                f"cannot hit sparsity {p}: all units clamped, budget off by "
                f"{removed_fixed - budget:g} weights"
            )
        if denom <= 0:
            if abs(remaining) <= 1.0:
                r[free] = 0.0
                break
            raise InfeasibleBudget(
                f"cannot hit sparsity {p}: no adjustable capacity left "
                f"({remaining:g} weights unassigned)"
            )
        gamma = remaining / denom
        r[free] = gamma * raws[free]
        over = free & (r > 1.0)
        under = free & (r < 0.0)
        if not over.any() and not under.any():
            break
        r[over], fixed[over] = 1.0, True
        r[under], fixed[under] = 0.0, True
    achieved = float(np.sum(r * numels))
    if abs(achieved - budget) > 1.0:
        raise InfeasibleBudget(
            f"budget misses by {achieved - budget:g} weights at sparsity {p}"
        )
    return Allocation(
        granularity=PER_LAYER,
        entries={u: float(max(0.0, min(1.0, v))) for u, v in zip(units, r)},
        importance={},
        metadata={
            "allocator": "er-plus" if plus_variant else "er",
            "target_sparsity": p,
        },
    )


def _er_raw(layer) -> float:
    # numel-weighted mean over blocks; layers in the eval chains have one block
    total = sum(b.numel for b in layer.blocks)
    acc = 0.0
    for b in layer.blocks:
        acc += (1.0 - (b.rows + b.cols) / (b.rows * b.cols)) * b.numel
    return acc / total


def nm_allocate(
    imp: ImportanceVector,
    m: int,
    p: float,
    alpha: Optional[float] = None,
) -> NMScheme:
    """Mixed N:M scheme: importance-driven N per unit at a fixed keep budget.

    The continuous keep fraction comes from the dynamic allocator; N values
    are rounded, clamped to [1, M], then greedily repaired toward the budget
    by largest/smallest rounding residual (ties to the lower unit index).
    """
    if m not in (4, 8):
        raise InvalidConfig(f"group size must be 4 or 8, got {m}")
    L = len(imp.units)
    if L == 0:
        raise InvalidConfig("importance vector has no units")
    a = default_alpha(p) if alpha is None else alpha
    budget = _round_half_up(L * m * (1.0 - p))
    if budget < L or budget > L * m:
        raise InfeasibleBudget(
            f"keep budget {budget} outside [{L}, {L * m}] for {L} units at M={m}"
        )
    r = _scale_shift(imp.values.astype(np.float64), p, a)
    keep = np.clip(1.0 - r, 0.0, 1.0)
    target = keep * m
    n_vals = np.array([min(m, max(1, _round_half_up(t))) for t in target], dtype=np.int64)
    residual = target - n_vals
    while int(n_vals.sum()) < budget:
        candidates = [i for i in range(L) if n_vals[i] < m]
        if not candidates:
            raise InfeasibleBudget("cannot raise any unit further")
        i = max(candidates, key=lambda j: (residual[j], -j))
        n_vals[i] += 1
        residual[i] -= 1.0
    while int(n_vals.sum()) > budget:
        candidates = [i for i in range(L) if n_vals[i] > 1]
        if not candidates:
            raise InfeasibleBudget("cannot lower any unit further")
        i = min(candidates, key=lambda j: (residual[j], j))
        n_vals[i] -= 1
        residual[i] += 1.0
    return NMScheme(
        m=m,
        per_layer_n=[int(v) for v in n_vals],
        units=list(imp.units),
        granularity=imp.granularity,
    )


def nm_to_allocation(
    scheme: NMScheme, p: float, alpha: float, granularity: str = PER_LAYER
) -> Allocation:
    """Record the N:M scheme as its induced per-unit sparsity plus metadata."""
    entries = {u: 1.0 - n / scheme.m for u, n in zip(scheme.units, scheme.per_layer_n)}
    return Allocation(
        granularity=granularity,
        entries=entries,
        importance={},
        metadata={
            "allocator": "dlp",
            "target_sparsity": p,
            "alpha": alpha,
            "nm": {"m": scheme.m, "per_layer_n": scheme.per_layer_n},
        },
    )


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))

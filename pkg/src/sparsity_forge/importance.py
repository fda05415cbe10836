"""Layer (or block) unimportance and the relative importance distribution.

Per-layer unimportance applies the chosen aggregator to the multiset of all
score entries of every block in the layer: the statistic sees one pooled
vector, not block-wise partial results. The relative importance of unit l
is then 1 - S_l / sum(S), with the sum running over all units, so the
values are scale-free and sum(1 - I) == 1.
"""

from dataclasses import dataclass
from typing import List

import numpy as np

from .errors import AllZeroUnimportance, CoverageGap, EmptyLayer, InvalidConfig
from .metrics import ScoreSet
from .model_io import PER_BLOCK, PER_LAYER, Model
from .stats import Aggregator, aggregate


@dataclass
class UnimportanceVector:
    granularity: str
    units: List[str]
    values: np.ndarray  # float64, one S per unit, model order
    aggregator: Aggregator


@dataclass
class ImportanceVector:
    granularity: str
    units: List[str]
    values: np.ndarray  # float64, one I per unit, each in [0, 1]


def unimportance(
    model: Model,
    scores: ScoreSet,
    granularity: str = PER_LAYER,
    aggregator: Aggregator = Aggregator.MEDIAN,
    *,
    combine: str = "concat",
) -> UnimportanceVector:
    """Aggregate block scores into one unimportance value per unit.

    ``combine`` is an experimentation switch: "concat" (default) pools every
    entry of the layer before aggregating; "sum-of-aggregates" instead sums
    the per-block statistic.
    """
    if granularity not in (PER_LAYER, PER_BLOCK):
        raise InvalidConfig(f"unknown granularity {granularity!r}")
    if combine not in ("concat", "sum-of-aggregates"):
        raise InvalidConfig(f"unknown combine mode {combine!r}")

    units: List[str] = []
    values: List[float] = []
    if granularity == PER_BLOCK:
        for layer, block in model.blocks():
            a = scores.for_block(layer.name, block.name)
            units.append(f"{layer.name}/{block.name}")
            values.append(aggregate(a.ravel(), aggregator))
    else:
        for layer in model.layers:
            if not layer.blocks:
                raise EmptyLayer(f"layer {layer.name!r} has no blocks")
            parts = [scores.for_block(layer.name, b.name).ravel() for b in layer.blocks]
            units.append(layer.name)
            if combine == "concat":
                values.append(aggregate(np.concatenate(parts), aggregator))
            else:
                values.append(float(sum(aggregate(p, aggregator) for p in parts)))
    return UnimportanceVector(
        granularity=granularity,
        units=units,
        values=np.asarray(values, dtype=np.float64),
        aggregator=aggregator,
    )


def rid(s: UnimportanceVector) -> ImportanceVector:
    """Relative importance: I_l = 1 - S_l / sum over all units of S."""
    total = float(np.sum(s.values))
    if total <= 0.0:
        raise AllZeroUnimportance("sum of unimportance values is zero")
    vals = 1.0 - s.values / total
    return ImportanceVector(granularity=s.granularity, units=list(s.units), values=vals)


def check_coverage(model: Model, scores: ScoreSet) -> None:
    """Every block of the model must have a score entry of the same shape."""
    for layer, block in model.blocks():
        a = scores.for_block(layer.name, block.name)
        if a.shape != (block.rows, block.cols):
            raise CoverageGap(
                f"scores for {layer.name!r}/{block.name!r} have shape {a.shape}, "
                f"block is {(block.rows, block.cols)}"
            )

"""Mask construction and application.

Selection scopes: per output row (each row pruned to its unit's ratio),
whole matrix (one pool per block), and global across the model (single
threshold over the concatenation of all blocks). Pruned counts round as
floor(R * n + 0.5) so audits are exact. All tie-breaks go to the smaller
flat index, which keeps masks bit-reproducible across runs and thread
counts. Masking zeroes weights; there is no reconstruction step.
"""

import enum
from typing import Dict, Optional

import numpy as np

from ._parallel import ordered_map
from .allocator import NMScheme, _round_half_up
from .errors import CoverageGap, DimMismatch, GroupSizeMismatch, InvalidConfig
from .metrics import ScoreSet
from .model_io import (
    Allocation,
    Block,
    BlockKey,
    BlockMask,
    Layer,
    MaskSet,
    Model,
    unit_of,
)
from .stats import rank_smallest


class SelectionScope(enum.Enum):
    PER_OUTPUT_ROW = "per-output"
    WHOLE_MATRIX = "whole-matrix"
    GLOBAL_ACROSS_MODEL = "global"


def prune_unstructured(
    scores: ScoreSet,
    alloc: Allocation,
    scope: SelectionScope = SelectionScope.PER_OUTPUT_ROW,
    model: Optional[Model] = None,
) -> MaskSet:
    """Materialize keep-masks from scores and a per-unit allocation."""
    if scope is SelectionScope.GLOBAL_ACROSS_MODEL:
        raise InvalidConfig("global scope ignores allocations; use prune_global")
    if model is not None:
        _check_cover(model, scores, alloc)

    items = list(scores.blocks.items())

    def one(item):
        (layer_name, block_name), a = item
        r = alloc.ratio_for_block(layer_name, block_name)
        if scope is SelectionScope.WHOLE_MATRIX:
            keep = _mask_whole(a, r)
        else:
            keep = _mask_per_row(a, r)
        return (layer_name, block_name), BlockMask.from_bool(keep)

    return MaskSet(blocks=dict(ordered_map(one, items)))


def _mask_whole(a: np.ndarray, r: float) -> np.ndarray:
    k = _round_half_up(r * a.size)
    keep = np.ones(a.size, dtype=bool)
    keep[rank_smallest(a.ravel(), k)] = False
    return keep.reshape(a.shape)


def _mask_per_row(a: np.ndarray, r: float) -> np.ndarray:
    k_row = _round_half_up(r * a.shape[1])
    keep = np.ones_like(a, dtype=bool)
    for i in range(a.shape[0]):
        keep[i, rank_smallest(a[i], k_row)] = False
    return keep


def prune_global(scores: ScoreSet, p: float) -> MaskSet:
    """One model-wide threshold: prune the globally smallest scores.

    Flat order is block order then row-major, and ties break by that flat
    index, so the result is independent of how blocks are partitioned.
    """
    if not (0.0 <= p <= 1.0):
        raise InvalidConfig(f"target sparsity {p} outside [0, 1]")
    keys = list(scores.blocks)
    flat = np.concatenate([scores.blocks[k].ravel() for k in keys]) if keys else np.empty(0)
    k = _round_half_up(p * flat.size)
    pruned = rank_smallest(flat, k)
    keep_flat = np.ones(flat.size, dtype=bool)
    keep_flat[pruned] = False
    out: Dict[BlockKey, BlockMask] = {}
    offset = 0
    for key in keys:
        a = scores.blocks[key]
        out[key] = BlockMask.from_bool(keep_flat[offset : offset + a.size].reshape(a.shape))
        offset += a.size
    return MaskSet(blocks=out)


def lamp_scores_block(weights: np.ndarray) -> np.ndarray:
    """Rank-relative second-moment scores for one weight matrix.

    Squared weights are sorted ascending (stable); each weight's score is
    its square over the suffix sum from its sorted position, so scores
    strictly increase along the sorted order and the largest weight always
    scores 1. Exact zeros score 0.
    """
    flat = weights.astype(np.float64).ravel()
    sq = flat**2
    order = np.argsort(sq, kind="stable")
    sorted_sq = sq[order]
    suffix = np.cumsum(sorted_sq[::-1])[::-1]
    scored = np.zeros_like(sorted_sq)
    nz = sorted_sq > 0.0
    scored[nz] = sorted_sq[nz] / suffix[nz]
    out = np.empty_like(scored)
    out[order] = scored
    return out.astype(np.float32).reshape(weights.shape)


def prune_lamp(model: Model, p: float) -> MaskSet:
    """Score each weight matrix with rank-relative scores, prune globally."""
    per_block = ScoreSet(
        metric="lamp",
        blocks={(layer.name, b.name): lamp_scores_block(b.weights) for layer, b in model.blocks()},
    )
    return prune_global(per_block, p)


def prune_nm(scores: ScoreSet, scheme: NMScheme) -> MaskSet:
    """Keep the N highest-scoring weights in every group of M along each row."""
    n_for_unit = dict(zip(scheme.units, scheme.per_layer_n))
    out: Dict[BlockKey, BlockMask] = {}
    for (layer_name, block_name), a in scores.blocks.items():
        unit = unit_of(scheme.granularity, layer_name, block_name)
        if unit not in n_for_unit:
            raise CoverageGap(f"no N:M entry for unit {unit!r}")
        n = n_for_unit[unit]
        rows, cols = a.shape
        if cols % scheme.m != 0:
            raise GroupSizeMismatch(
                f"block {block_name!r}: {cols} columns not divisible by M={scheme.m}"
            )
        grouped = a.reshape(rows, cols // scheme.m, scheme.m)
        # stable argsort on negated scores keeps the lower index first on ties
        order = np.argsort(-grouped, axis=-1, kind="stable")
        keep = np.zeros_like(grouped, dtype=bool)
        np.put_along_axis(keep, order[..., :n], True, axis=-1)
        out[(layer_name, block_name)] = BlockMask.from_bool(keep.reshape(rows, cols))
    return MaskSet(blocks=out)


def apply_masks(model: Model, masks: MaskSet) -> Model:
    """Hadamard-apply keep-masks to the weights; structure is preserved."""
    layers = []
    for layer in model.layers:
        blocks = []
        for b in layer.blocks:
            bm = masks.for_block(layer.name, b.name)
            if (bm.rows, bm.cols) != (b.rows, b.cols):
                raise DimMismatch(
                    f"mask for {layer.name!r}/{b.name!r} is {bm.rows}x{bm.cols}, "
                    f"block is {b.rows}x{b.cols}"
                )
            blocks.append(Block(name=b.name, weights=b.weights * bm.to_bool()))
        layers.append(Layer(name=layer.name, activation=layer.activation, blocks=blocks))
    return Model(layers=layers)


def _check_cover(model: Model, scores: ScoreSet, alloc: Allocation) -> None:
    for layer, block in model.blocks():
        if (layer.name, block.name) not in scores.blocks:
            raise CoverageGap(f"no scores for {layer.name!r}/{block.name!r}")
        alloc.ratio_for_block(layer.name, block.name)

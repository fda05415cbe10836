"""Per-weight saliency metrics and calibration-statistic construction.

Three metrics are supported: plain magnitude |W|, activation-weighted
magnitude |W| * column-norm (wanda), and the Hessian-diagonal second-order
score W^2 / diag((X^T X + lambda I)^-1) (sparsegpt). Only the scoring side
of the second-order method is implemented; there is no weight update after
masking. Scores are float32 end to end so the in-memory values match the
serialized container exactly.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import model_io
from ._parallel import ordered_map
from .errors import (
    DimMismatch,
    DuplicateName,
    ManifestMismatch,
    MissingGram,
    NonFinite,
    NonFiniteActivation,
    SingularHessian,
)
from .model_io import Block, BlockCalib, BlockKey, CalibStats, Model, PathLike

METRICS = ("magnitude", "wanda", "sparsegpt")

# Cholesky pivots below this fraction of the largest damped-diagonal entry
# mean the normal equations are numerically rank-deficient.
PIVOT_RTOL = 1e-12


@dataclass
class ScoreSet:
    metric: str
    blocks: Dict[BlockKey, np.ndarray] = field(default_factory=dict)  # float32, >= 0

    def for_block(self, layer_name: str, block_name: str) -> np.ndarray:
        key = (layer_name, block_name)
        if key not in self.blocks:
            from .errors import CoverageGap

            raise CoverageGap(f"no scores for {layer_name!r}/{block_name!r}")
        return self.blocks[key]


def magnitude_scores(block: Block) -> np.ndarray:
    return np.abs(block.weights)


def wanda_scores(block: Block, col_norms: np.ndarray) -> np.ndarray:
    cn = np.asarray(col_norms, dtype=np.float32).ravel()
    if cn.size != block.cols:
        raise DimMismatch(f"col_norms length {cn.size}, block has {block.cols} columns")
    if np.any(cn < 0):
        from .errors import InvalidConfig

        raise InvalidConfig("col_norms must be nonnegative")
    return np.abs(block.weights) * cn[np.newaxis, :]


def sparsegpt_scores(block: Block, gram: Optional[np.ndarray], damping: float) -> np.ndarray:
    if gram is None:
        raise MissingGram(f"block {block.name!r}: second-order metric needs the Gram matrix")
    g = np.asarray(gram, dtype=np.float64)
    c = block.cols
    if g.shape != (c, c):
        raise DimMismatch(f"gram shape {g.shape}, block has {c} columns")
    if damping < 0:
        raise DimMismatch("damping must be >= 0")
    inv_diag = _damped_inverse_diagonal(g, damping)
    w2 = block.weights.astype(np.float64) ** 2
    return (w2 / inv_diag[np.newaxis, :]).astype(np.float32)


def _damped_inverse_diagonal(gram: np.ndarray, damping: float) -> np.ndarray:
    """diag((G + damping*I)^-1) via float64 Cholesky of the full damped matrix."""
    h = gram + damping * np.eye(gram.shape[0])
    try:
        chol = np.linalg.cholesky(h)
    except np.linalg.LinAlgError as e:
        raise SingularHessian(f"damped Gram is not positive definite: {e}") from e
    pivots = np.diag(chol) ** 2
    floor = PIVOT_RTOL * max(float(np.max(np.diag(h))), 1e-300)
    if np.any(pivots < floor):
        raise SingularHessian(f"Cholesky pivot below {floor:g}")
    # H^-1 = L^-T L^-1, so its diagonal is the column-wise squared norm of L^-1.
    linv = np.linalg.solve(chol, np.eye(chol.shape[0]))
    return np.sum(linv**2, axis=0)


def default_damping(gram: np.ndarray) -> float:
    """1% of the mean damped-matrix diagonal, floored at 1e-8."""
    g = np.asarray(gram, dtype=np.float64)
    return max(0.01 * float(np.mean(np.diag(g))), 1e-8)


def build_calib_stats(inputs: Dict[BlockKey, np.ndarray]) -> CalibStats:
    """Summarize raw per-block activations into column norms and Gram matrices.

    Accumulation runs in float64 and is stored float32, which keeps
    col_norms[j]^2 consistent with gram[j][j] at the declared tolerance.
    """
    entries: Dict[BlockKey, BlockCalib] = {}
    for key, x in inputs.items():
        entries[key] = calib_from_activations(x)
    return CalibStats(entries=entries)


def calib_from_activations(x: np.ndarray, with_gram: bool = True) -> BlockCalib:
    a = np.asarray(x, dtype=np.float32)
    if a.ndim != 2 or a.shape[0] < 1:
        raise NonFiniteActivation(f"activations must be a non-empty 2-D matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteActivation("activations contain NaN/Inf")
    x64 = a.astype(np.float64)
    gram64 = x64.T @ x64
    col_norms = np.sqrt(np.diag(gram64)).astype(np.float32)
    gram = gram64.astype(np.float32) if with_gram else None
    return BlockCalib(col_norms=col_norms, gram=gram, sample_count=int(a.shape[0]))


def score_model(
    model: Model,
    metric: str,
    calib: Optional[CalibStats] = None,
    damping: Optional[float] = None,
) -> ScoreSet:
    """Score every block of a model with the named metric."""
    if metric not in METRICS:
        raise ManifestMismatch(f"unknown metric {metric!r}")
    if metric in ("wanda", "sparsegpt") and calib is None:
        raise MissingGram(f"metric {metric!r} needs calibration statistics")

    pairs = list(model.blocks())

    def one(pair) -> Tuple[BlockKey, np.ndarray]:
        layer, block = pair
        if metric == "magnitude":
            a = magnitude_scores(block)
        elif metric == "wanda":
            bc = calib.for_block(layer.name, block.name)
            a = wanda_scores(block, bc.col_norms)
        else:
            bc = calib.for_block(layer.name, block.name)
            if bc.gram is None:
                raise MissingGram(f"block {block.name!r}: calibration lacks a Gram matrix")
            lam = damping if damping is not None else default_damping(bc.gram)
            a = sparsegpt_scores(block, bc.gram, lam)
        return (layer.name, block.name), a

    return ScoreSet(metric=metric, blocks=dict(ordered_map(one, pairs)))


def masked_scores(
    model: Model,
    masks: "model_io.MaskSet",
    metric: str,
    calib: Optional[CalibStats] = None,
    damping: Optional[float] = None,
) -> ScoreSet:
    """Recompute scores after zeroing masked weights (post-pruning view)."""
    from .pruner import apply_masks

    return score_model(apply_masks(model, masks), metric, calib=calib, damping=damping)


# ---------------------------------------------------------------------------
# score container (same manifest + blob idiom as the model files)


def save_scores(
    scores: ScoreSet, path: PathLike, extra: Optional[dict] = None
) -> Tuple[Path, Path]:
    stem = model_io.stem_of(path)
    manifest: dict = {
        "format": "sparsity-forge/score",
        "version": 1,
        "dtype": model_io.F32,
        "metric": scores.metric,
        "blocks": [],
    }
    if extra:
        manifest["config"] = extra
    chunks: List[bytes] = []
    offset = 0
    for (layer_name, block_name), a in scores.blocks.items():
        arr = np.ascontiguousarray(a, dtype=np.float32)
        manifest["blocks"].append(
            {
                "layer": layer_name,
                "block": block_name,
                "rows": int(arr.shape[0]),
                "cols": int(arr.shape[1]),
                "offset": offset,
            }
        )
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    json_path = model_io._with(stem, ".score.json")
    bin_path = model_io._with(stem, ".score.bin")
    model_io._write_json(json_path, manifest)
    bin_path.write_bytes(b"".join(chunks))
    return json_path, bin_path


def load_scores(path: PathLike) -> ScoreSet:
    stem = model_io.stem_of(path)
    manifest = model_io._read_json(model_io._with(stem, ".score.json"), "sparsity-forge/score")
    bin_path = model_io._with(stem, ".score.bin")
    blob = bin_path.read_bytes()
    metric = str(manifest.get("metric", ""))
    if metric not in METRICS:
        raise ManifestMismatch(f"unknown metric {metric!r} in score manifest")
    blocks: Dict[BlockKey, np.ndarray] = {}
    expected = 0
    for bent in manifest.get("blocks", []):
        rows, cols = int(bent["rows"]), int(bent["cols"])
        a = model_io._blob_slice(blob, int(bent["offset"]), rows * cols, bin_path)
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise NonFinite(f"scores for {bent.get('layer')!r}/{bent.get('block')!r} invalid")
        key = (str(bent["layer"]), str(bent["block"]))
        if key in blocks:
            raise DuplicateName(f"score block {key} duplicated")
        blocks[key] = a.reshape(rows, cols)
        expected += rows * cols * 4
    if expected != len(blob):
        raise ManifestMismatch(f"manifest declares {expected} blob bytes, file has {len(blob)}")
    return ScoreSet(metric=metric, blocks=blocks)

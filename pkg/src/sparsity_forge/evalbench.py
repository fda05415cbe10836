"""Synthetic benchmark models, forward evaluation, and pruning diagnostics.

Generated models are chains of single-block layers with weights drawn from
a counter-based 64-bit PRNG (numpy Philox keyed by the seed), so identical
(config, seed) pairs produce identical bytes on any platform. Each layer's
base entries are Normal(0, sigma_l) with a fraction q_l independently
inflated by the outlier factor. The redundancy gradient ramps sigma_l with
depth (later layers carry higher score medians) and, through the schedule
helper, also tilts the outlier rates toward later layers. The tilt is
what makes the deeper layers genuinely cheaper to prune rather than merely
looking that way, since a pure scale ramp cancels out of a linear chain's
output sensitivity.

Diagnostics: squared-output reconstruction error per layer, the outlier
share of score entries above a multiple of the mean, output-MSE divergence
between a dense and a pruned model, and mask/allocation audits.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import (
    CoverageGap,
    DimMismatch,
    InvalidConfig,
    TopologyMismatch,
    UnsupportedTopology,
)
from .metrics import CalibStats, ScoreSet, build_calib_stats
from .model_io import (
    PER_LAYER,
    Allocation,
    Block,
    BlockKey,
    Layer,
    MaskSet,
    Model,
    PathLike,
    stem_of,
    unit_of,
    _with,
    _write_json,
)


@dataclass
class SynthConfig:
    layer_count: int
    dims: List[Tuple[int, int]]  # (rows, cols) per layer, chain-compatible
    base_scale: float
    outlier_rates: List[float]  # q_l per layer
    outlier_factor: float
    redundancy_gradient: float
    seed: int
    activation: str = "identity"
    calib_samples: int = 128
    holdout_samples: int = 128

    def __post_init__(self):
        L = self.layer_count
        if L < 1:
            raise InvalidConfig("layer_count must be >= 1")
        if len(self.dims) != L or len(self.outlier_rates) != L:
            raise InvalidConfig("dims and outlier_rates must have one entry per layer")
        for rows, cols in self.dims:
            if rows < 1 or cols < 1:
                raise InvalidConfig(f"bad layer dims ({rows}, {cols})")
        for l in range(1, L):
            if self.dims[l][1] != self.dims[l - 1][0]:
                raise InvalidConfig(
                    f"layer {l} expects {self.dims[l][1]} inputs, "
                    f"layer {l - 1} emits {self.dims[l - 1][0]}"
                )
        for q in self.outlier_rates:
            if not (0.0 <= q <= 1.0):
                raise InvalidConfig(f"outlier rate {q} outside [0, 1]")
        if self.base_scale <= 0 or self.outlier_factor <= 1:
            raise InvalidConfig("base_scale must be > 0 and outlier_factor > 1")
        if self.redundancy_gradient < 0:
            raise InvalidConfig("redundancy_gradient must be >= 0")
        if not (0 <= self.seed < 2**64):
            raise InvalidConfig("seed must be an unsigned 64-bit integer")
        if self.activation not in ("identity", "relu"):
            raise InvalidConfig(f"unknown activation {self.activation!r}")
        if self.calib_samples < 1 or self.holdout_samples < 1:
            raise InvalidConfig("sample counts must be >= 1")

    def median_target(self, layer_index: int) -> float:
        if self.layer_count == 1:
            return 1.0
        frac = layer_index / (self.layer_count - 1)
        return 1.0 + self.redundancy_gradient * frac

    def sigmas(self) -> List[float]:
        """Per-layer weight scales hitting the planted median schedule.

        The activation-weighted score median of layer l is proportional to
        sigma_l times the typical input magnitude, which compounds through
        the chain. Dividing each layer's target by the expected input RMS
        (tracked via second moments, outlier factor included) makes the
        score medians ramp linearly with depth instead of exponentially;
        without this the deepest layer dwarfs the rest and min-max
        normalized importance degenerates to a two-level split.
        """
        act_factor = 0.5 if self.activation == "relu" else 1.0
        out: List[float] = []
        u = 1.0  # expected per-coordinate input RMS, layer 0 inputs are N(0,1)
        for l in range(self.layer_count):
            target = self.base_scale * self.median_target(l)
            out.append(target / u)
            kappa = 1.0 + self.outlier_rates[l] * (self.outlier_factor**2 - 1.0)
            u = target * np.sqrt(self.dims[l][1] * kappa * act_factor)
        return out


def outlier_schedule(mean_rate: float, layer_count: int, gradient: float) -> List[float]:
    """Depth-tilted outlier rates with the requested mean.

    With gradient 0 the schedule is flat; otherwise rates ramp linearly from
    below to above the mean (slope saturates at +/-100% of the mean), giving
    later layers the larger outlier share.
    """
    if not (0.0 <= mean_rate <= 1.0):
        raise InvalidConfig(f"outlier rate {mean_rate} outside [0, 1]")
    if layer_count == 1 or gradient == 0.0:
        return [mean_rate] * layer_count
    slope = min(1.0, gradient)
    out = []
    for l in range(layer_count):
        t = 2.0 * l / (layer_count - 1) - 1.0  # -1 .. 1
        out.append(min(1.0, max(0.0, mean_rate * (1.0 + slope * t))))
    return out


def default_config(
    layers: int,
    rows: int,
    cols: int,
    seed: int,
    *,
    outlier_rate: float = 0.05,
    outlier_factor: float = 10.0,
    redundancy_gradient: float = 1.0,
    base_scale: Optional[float] = None,
    activation: str = "identity",
    calib_samples: int = 128,
    holdout_samples: int = 128,
) -> SynthConfig:
    """Standard chain config: first layer rows x cols, then square rows x rows."""
    dims = [(rows, cols)] + [(rows, rows)] * (layers - 1)
    scale = base_scale if base_scale is not None else 1.0 / float(np.sqrt(cols))
    return SynthConfig(
        layer_count=layers,
        dims=dims,
        base_scale=scale,
        outlier_rates=outlier_schedule(outlier_rate, layers, redundancy_gradient),
        outlier_factor=outlier_factor,
        redundancy_gradient=redundancy_gradient,
        seed=seed,
        activation=activation,
        calib_samples=calib_samples,
        holdout_samples=holdout_samples,
    )


def gen_synthetic(cfg: SynthConfig) -> Tuple[Model, CalibStats, np.ndarray]:
    """Deterministically generate (model, calibration stats, held-out batch)."""
    rng = np.random.Generator(np.random.Philox(key=np.uint64(cfg.seed)))
    sigmas = cfg.sigmas()
    layers: List[Layer] = []
    for l in range(cfg.layer_count):
        rows, cols = cfg.dims[l]
        base = rng.normal(0.0, sigmas[l], size=(rows, cols))
        inflate = rng.random(size=(rows, cols)) < cfg.outlier_rates[l]
        w = np.where(inflate, base * cfg.outlier_factor, base).astype(np.float32)
        layers.append(
            Layer(name=f"layer{l:02d}", activation=cfg.activation, blocks=[Block("w", w)])
        )
    model = Model(layers=layers)

    c_in = cfg.dims[0][1]
    calib_x = rng.normal(0.0, 1.0, size=(cfg.calib_samples, c_in)).astype(np.float32)
    holdout = rng.normal(0.0, 1.0, size=(cfg.holdout_samples, c_in)).astype(np.float32)

    _, layer_inputs = forward(model, calib_x)
    calib = build_calib_stats(
        {(layer.name, layer.blocks[0].name): x for layer, x in zip(model.layers, layer_inputs)}
    )
    return model, calib, holdout


def forward(model: Model, x: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Run a batch through a single-block chain; also return each layer's input.

    Matmuls accumulate in float64 and each layer boundary rounds to float32,
    which keeps the recorded activations reproducible across BLAS settings.
    """
    a = np.asarray(x, dtype=np.float32)
    if a.ndim != 2:
        raise DimMismatch(f"batch must be 2-D, got shape {a.shape}")
    inputs: List[np.ndarray] = []
    for layer in model.layers:
        if len(layer.blocks) != 1:
            raise UnsupportedTopology(
                f"layer {layer.name!r} has {len(layer.blocks)} blocks; forward needs exactly 1"
            )
        w = layer.blocks[0].weights
        if a.shape[1] != w.shape[1]:
            raise DimMismatch(
                f"layer {layer.name!r} expects {w.shape[1]} features, batch has {a.shape[1]}"
            )
        inputs.append(a)
        out = a.astype(np.float64) @ w.astype(np.float64).T
        if layer.activation == "relu":
            out = np.maximum(out, 0.0)
        a = out.astype(np.float32)
    return a, inputs


def reconstruction_error(w: np.ndarray, w_masked: np.ndarray, x: np.ndarray) -> float:
    """Squared output difference ||W x - W_masked x||_F^2, float64 accumulation.

    ``x`` is feature-major: shape (C_in, n_samples).
    """
    w = np.asarray(w, dtype=np.float64)
    wm = np.asarray(w_masked, dtype=np.float64)
    xf = np.asarray(x, dtype=np.float64)
    if w.shape != wm.shape:
        raise DimMismatch(f"weight shapes differ: {w.shape} vs {wm.shape}")
    if xf.ndim != 2 or xf.shape[0] != w.shape[1]:
        raise DimMismatch(f"x must be ({w.shape[1]}, n), got {xf.shape}")
    d = (w - wm) @ xf
    return float(np.sum(d * d))


def lod(scores: ScoreSet, multiplier: float, granularity: str = PER_LAYER) -> Dict[str, float]:
    """Per-unit outlier share: fraction of entries above multiplier * mean.

    The mean runs over every entry of the unit, zeros included, so the same
    definition serves pre- and post-pruning score sets.
    """
    if multiplier <= 0:
        raise InvalidConfig("multiplier must be > 0")
    grouped: Dict[str, List[np.ndarray]] = {}
    for (layer_name, block_name), a in scores.blocks.items():
        unit = unit_of(granularity, layer_name, block_name)
        grouped.setdefault(unit, []).append(a.ravel())
    out: Dict[str, float] = {}
    for unit, parts in grouped.items():
        flat = np.concatenate(parts).astype(np.float64)
        thr = multiplier * float(flat.mean())
        out[unit] = float(np.count_nonzero(flat > thr) / flat.size)
    return out


def lod_summary(per_unit: Dict[str, float], unit_numels: Dict[str, int]) -> Dict[str, float]:
    """Model-level outlier share, both pooled (weight-weighted) and unweighted."""
    units = list(per_unit)
    total = sum(unit_numels[u] for u in units)
    pooled = sum(per_unit[u] * unit_numels[u] for u in units) / total
    return {"pooled": float(pooled), "mean": float(np.mean([per_unit[u] for u in units]))}


def divergence(dense: Model, pruned: Model, x: np.ndarray) -> float:
    """Mean squared difference of final outputs over the batch."""
    _check_same_topology(dense, pruned)
    out_d, _ = forward(dense, x)
    out_p, _ = forward(pruned, x)
    d = out_d.astype(np.float64) - out_p.astype(np.float64)
    return float(np.mean(d * d))


def _check_same_topology(a: Model, b: Model) -> None:
    if len(a.layers) != len(b.layers):
        raise TopologyMismatch(f"{len(a.layers)} vs {len(b.layers)} layers")
    for la, lb in zip(a.layers, b.layers):
        if la.name != lb.name or la.activation != lb.activation:
            raise TopologyMismatch(f"layer {la.name!r} vs {lb.name!r}")
        if [(x.name, x.rows, x.cols) for x in la.blocks] != [
            (x.name, x.rows, x.cols) for x in lb.blocks
        ]:
            raise TopologyMismatch(f"blocks differ in layer {la.name!r}")


def audit(masks: MaskSet, alloc: Allocation) -> dict:
    """Achieved sparsity per unit and globally, from mask popcounts.

    A unit is flagged when its achieved sparsity misses the requested ratio
    by more than one part per row width (the per-output rounding bound).
    """
    per_unit: Dict[str, dict] = {}
    for (layer_name, block_name), bm in masks.blocks.items():
        unit = unit_of(alloc.granularity, layer_name, block_name)
        slot = per_unit.setdefault(
            unit, {"zeros": 0, "numel": 0, "min_cols": bm.cols}
        )
        slot["zeros"] += bm.zero_count
        slot["numel"] += bm.numel
        slot["min_cols"] = min(slot["min_cols"], bm.cols)
    units = []
    total_zeros = 0
    total_numel = 0
    for unit, slot in per_unit.items():
        if unit not in alloc.entries:
            raise CoverageGap(f"mask unit {unit!r} missing from allocation")
        requested = float(alloc.entries[unit])
        achieved = slot["zeros"] / slot["numel"]
        bound = 1.0 / slot["min_cols"]
        units.append(
            {
                "unit": unit,
                "requested_sparsity": requested,
                "achieved_sparsity": achieved,
                "zeros": slot["zeros"],
                "numel": slot["numel"],
                "flagged": bool(abs(achieved - requested) > bound),
            }
        )
        total_zeros += slot["zeros"]
        total_numel += slot["numel"]
    return {
        "units": units,
        "global": {
            "achieved_sparsity": total_zeros / total_numel if total_numel else 0.0,
            "zeros": total_zeros,
            "numel": total_numel,
        },
    }


# ---------------------------------------------------------------------------
# report assembly


def build_report(
    model: Model,
    masks: MaskSet,
    alloc: Allocation,
    batch: np.ndarray,
    post_scores: ScoreSet,
    multiplier: float = 7.0,
    extra: Optional[dict] = None,
) -> dict:
    """Join audit, importance, outlier-share, and error diagnostics per unit."""
    from .pruner import apply_masks

    pruned = apply_masks(model, masks)
    aud = audit(masks, alloc)
    d_per_unit = lod(post_scores, multiplier, alloc.granularity)
    numels = {row["unit"]: row["numel"] for row in aud["units"]}
    summary = lod_summary(d_per_unit, numels)

    recon: Dict[str, float] = {}
    forwardable = all(len(layer.blocks) == 1 for layer in model.layers)
    if forwardable:
        _, layer_inputs = forward(model, batch)
        for layer, x_in in zip(model.layers, layer_inputs):
            b = layer.blocks[0]
            bm = masks.for_block(layer.name, b.name)
            err = reconstruction_error(b.weights, b.weights * bm.to_bool(), x_in.T)
            recon[unit_of(alloc.granularity, layer.name, b.name)] = err

    unit_rows = []
    for row in aud["units"]:
        u = row["unit"]
        unit_rows.append(
            {
                **row,
                "importance": alloc.importance.get(u),
                "lod": d_per_unit.get(u),
                "reconstruction_error": recon.get(u),
            }
        )
    out = {
        "units": unit_rows,
        "global": {
            **aud["global"],
            "divergence": divergence(model, pruned, batch) if forwardable else None,
            "lod_pooled": summary["pooled"],
            "lod_mean": summary["mean"],
            "outlier_multiplier": multiplier,
            "allocator": alloc.metadata.get("allocator"),
            "metric": alloc.metadata.get("metric"),
            "aggregator": alloc.metadata.get("aggregator"),
            "target_sparsity": alloc.metadata.get("target_sparsity"),
        },
    }
    if extra:
        out["global"].update(extra)
    return out


def write_report(report: dict, path: PathLike) -> Tuple[Path, Path]:
    """Emit the report as JSON plus a flat CSV (unit rows, then one global row)."""
    stem = stem_of(path)
    json_path = _with(stem, ".report.json")
    _write_json(json_path, report)
    csv_path = _with(stem, ".report.csv")
    cols = [
        "kind",
        "unit",
        "requested_sparsity",
        "achieved_sparsity",
        "importance",
        "lod",
        "reconstruction_error",
        "divergence",
    ]
    lines = [",".join(cols)]
    for row in report["units"]:
        lines.append(
            ",".join(
                [
                    "unit",
                    row["unit"],
                    _csv_num(row.get("requested_sparsity")),
                    _csv_num(row.get("achieved_sparsity")),
                    _csv_num(row.get("importance")),
                    _csv_num(row.get("lod")),
                    _csv_num(row.get("reconstruction_error")),
                    "",
                ]
            )
        )
    g = report["global"]
    lines.append(
        ",".join(
            [
                "global",
                "",
                _csv_num(g.get("target_sparsity")),
                _csv_num(g.get("achieved_sparsity")),
                "",
                _csv_num(g.get("lod_pooled")),
                "",
                _csv_num(g.get("divergence")),
            ]
        )
    )
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return json_path, csv_path


def _csv_num(v) -> str:
    if v is None:
        return ""
    return repr(float(v))

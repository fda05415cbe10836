"""Subcommand front-end: gen | score | importance | allocate | prune | eval | lod | compare.

Every run prints one JSON document on stdout holding the fully resolved
config (defaults filled in) plus results; diagnostics go to stderr. Exit
codes: 0 success, 1 domain error (printed as ``ERROR <Code>: <detail>``),
2 usage error. Reruns from the echoed config reproduce output files
byte-for-byte. Existing outputs are never overwritten without --force.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import evalbench, metrics, model_io, pruner
from .allocator import (
    DlpConfig,
    default_alpha,
    dlp_allocate,
    er_allocate,
    nm_allocate,
    nm_to_allocation,
    owl_allocate,
    uniform_allocate,
)
from .errors import ForgeError, InvalidConfig, OutputExists
from .importance import rid, unimportance
from .model_io import PER_BLOCK, PER_LAYER, stem_of, _with
from .pruner import SelectionScope
from .stats import Aggregator

AGGREGATORS = {a.value: a for a in Aggregator}
SCOPES = {s.value: s for s in SelectionScope}
ALLOCATORS = ("dlp", "uniform", "owl", "er", "er-plus", "lamp", "global")


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        doc = args.func(args)
    except ForgeError as e:
        print(f"ERROR {e.code}: {e.detail}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"ERROR IOError: {e}", file=sys.stderr)
        return 1
    print(json.dumps(doc, indent=2))
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsity-forge", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic model + calibration + holdout batch")
    g.add_argument("--layers", type=int, default=8)
    g.add_argument("--rows", type=int, default=64)
    g.add_argument("--cols", type=int, default=64)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--base-scale", type=float, default=None,
                   help="score-median scale (default 1/sqrt(cols))")
    g.add_argument("--outlier-rate", type=float, default=0.05)
    g.add_argument("--outlier-factor", type=float, default=10.0)
    g.add_argument("--redundancy-gradient", type=float, default=1.0)
    g.add_argument("--activation", choices=["identity", "relu"], default="identity")
    g.add_argument("--calib-samples", type=int, default=128)
    g.add_argument("--holdout-samples", type=int, default=128)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=_cmd_gen)

    s = sub.add_parser("score", help="score every block with a saliency metric")
    s.add_argument("--model", required=True)
    s.add_argument("--calib", default=None)
    s.add_argument("--metric", choices=list(metrics.METRICS), default="wanda")
    s.add_argument("--damping", type=float, default=None,
                   help="second-order damping (default: 1%% of mean Gram diagonal)")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=_cmd_score)

    i = sub.add_parser("importance", help="unimportance and relative importance per unit")
    i.add_argument("--model", required=True)
    i.add_argument("--scores", required=True)
    i.add_argument("--aggregator", choices=list(AGGREGATORS), default="median")
    i.add_argument("--granularity", choices=[PER_LAYER, PER_BLOCK], default=PER_LAYER)
    i.add_argument("--out", default=None)
    i.add_argument("--force", action="store_true")
    i.set_defaults(func=_cmd_importance)

    a = sub.add_parser("allocate", help="turn importance into per-unit sparsity ratios")
    a.add_argument("--model", required=True)
    a.add_argument("--scores", default=None)
    a.add_argument("--allocator", choices=list(ALLOCATORS), default="dlp")
    a.add_argument("--sparsity", type=float, required=True)
    a.add_argument("--alpha", type=float, default=None,
                   help="deflation scale (default from the per-sparsity table)")
    a.add_argument("--aggregator", choices=list(AGGREGATORS), default="median")
    a.add_argument("--granularity", choices=[PER_LAYER, PER_BLOCK], default=PER_LAYER)
    a.add_argument("--nm", type=int, default=None, help="group size M for mixed N:M allocation")
    a.add_argument("--owl-multiplier", type=float, default=7.0)
    a.add_argument("--out", required=True)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=_cmd_allocate)

    r = sub.add_parser("prune", help="materialize keep-masks")
    r.add_argument("--model", required=True)
    r.add_argument("--scores", default=None)
    r.add_argument("--alloc", default=None)
    r.add_argument("--allocator", choices=["alloc", "global", "lamp"], default="alloc",
                   help="'alloc' consumes --alloc; global/lamp prune directly at --sparsity")
    r.add_argument("--scope", choices=list(SCOPES), default="per-output")
    r.add_argument("--sparsity", type=float, default=None)
    r.add_argument("--out", required=True)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=_cmd_prune)

    e = sub.add_parser("eval", help="audit masks and report divergence diagnostics")
    e.add_argument("--model", required=True)
    e.add_argument("--mask", required=True)
    e.add_argument("--alloc", required=True)
    e.add_argument("--batch", required=True)
    e.add_argument("--calib", default=None)
    e.add_argument("--metric", choices=list(metrics.METRICS), default="wanda")
    e.add_argument("--outlier-multiplier", type=float, default=7.0)
    e.add_argument("--out", required=True)
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=_cmd_eval)

    d = sub.add_parser("lod", help="outlier share of score entries per unit")
    d.add_argument("--model", required=True)
    d.add_argument("--calib", default=None)
    d.add_argument("--mask", default=None, help="recompute scores on masked weights first")
    d.add_argument("--metric", choices=list(metrics.METRICS), default="wanda")
    d.add_argument("--outlier-multiplier", type=float, default=7.0)
    d.add_argument("--granularity", choices=[PER_LAYER, PER_BLOCK], default=PER_LAYER)
    d.add_argument("--out", default=None)
    d.add_argument("--force", action="store_true")
    d.set_defaults(func=_cmd_lod)

    c = sub.add_parser("compare", help="run a grid of allocators and emit a joined CSV")
    c.add_argument("--model", required=True)
    c.add_argument("--calib", required=True)
    c.add_argument("--batch", required=True)
    c.add_argument("--sparsity", type=float, required=True)
    c.add_argument("--alpha", type=float, default=None)
    c.add_argument("--metric", choices=list(metrics.METRICS), default="wanda")
    c.add_argument("--aggregator", choices=list(AGGREGATORS), default="median")
    c.add_argument("--scope", choices=["per-output", "whole-matrix"], default="per-output")
    c.add_argument("--allocators", default=",".join(ALLOCATORS),
                   help="comma-separated subset of " + ",".join(ALLOCATORS))
    c.add_argument("--owl-multiplier", type=float, default=7.0)
    c.add_argument("--out", required=True)
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=_cmd_compare)
    return p


def _refuse_overwrite(paths: List[Path], force: bool) -> None:
    if force:
        return
    for path in paths:
        if path.exists():
            raise OutputExists(f"{path} exists; pass --force to overwrite")


def _out_paths(out: str, *suffixes: str) -> List[Path]:
    stem = stem_of(out)
    return [_with(stem, s) for s in suffixes]


# ---------------------------------------------------------------------------
# commands


def _cmd_gen(args) -> dict:
    cfg = evalbench.default_config(
        args.layers,
        args.rows,
        args.cols,
        args.seed,
        outlier_rate=args.outlier_rate,
        outlier_factor=args.outlier_factor,
        redundancy_gradient=args.redundancy_gradient,
        base_scale=args.base_scale,
        activation=args.activation,
        calib_samples=args.calib_samples,
        holdout_samples=args.holdout_samples,
    )
    resolved = {
        "command": "gen",
        "layers": cfg.layer_count,
        "rows": args.rows,
        "cols": args.cols,
        "seed": cfg.seed,
        "base_scale": cfg.base_scale,
        "outlier_rate": args.outlier_rate,
        "outlier_rates": cfg.outlier_rates,
        "outlier_factor": cfg.outlier_factor,
        "redundancy_gradient": cfg.redundancy_gradient,
        "activation": cfg.activation,
        "calib_samples": cfg.calib_samples,
        "holdout_samples": cfg.holdout_samples,
        "out": args.out,
    }
    outs = _out_paths(args.out, ".model.json", ".model.bin", ".calib.json", ".calib.bin",
                      ".batch.json", ".batch.bin")
    _refuse_overwrite(outs, args.force)
    model, calib, holdout = evalbench.gen_synthetic(cfg)
    model_io.save_model(model, args.out, extra=resolved)
    model_io.save_calib(calib, args.out, extra=resolved)
    model_io.save_batch(holdout, args.out, extra=resolved)
    return {"config": resolved, "outputs": [str(p) for p in outs]}


def _cmd_score(args) -> dict:
    model = model_io.load_model(args.model)
    calib = model_io.load_calib(args.calib) if args.calib else None
    resolved = {
        "command": "score",
        "model": args.model,
        "calib": args.calib,
        "metric": args.metric,
        "damping": args.damping if args.damping is not None else "auto",
        "out": args.out,
    }
    outs = _out_paths(args.out, ".score.json", ".score.bin")
    _refuse_overwrite(outs, args.force)
    scores = metrics.score_model(model, args.metric, calib=calib, damping=args.damping)
    metrics.save_scores(scores, args.out, extra=resolved)
    return {"config": resolved, "outputs": [str(p) for p in outs]}


def _cmd_importance(args) -> dict:
    model = model_io.load_model(args.model)
    scores = metrics.load_scores(args.scores)
    resolved = {
        "command": "importance",
        "model": args.model,
        "scores": args.scores,
        "metric": scores.metric,
        "aggregator": args.aggregator,
        "granularity": args.granularity,
        "out": args.out,
    }
    s = unimportance(model, scores, args.granularity, AGGREGATORS[args.aggregator])
    i = rid(s)
    doc = {
        "config": resolved,
        "units": s.units,
        "unimportance": [float(v) for v in s.values],
        "importance": [float(v) for v in i.values],
    }
    if args.out:
        out = Path(args.out)
        _refuse_overwrite([out], args.force)
        out.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return doc


def _cmd_allocate(args) -> dict:
    model = model_io.load_model(args.model)
    p = args.sparsity
    if not (0.0 <= p <= 1.0):
        raise InvalidConfig(f"--sparsity {p} outside [0, 1]")
    alpha = args.alpha if args.alpha is not None else default_alpha(p)
    resolved = {
        "command": "allocate",
        "model": args.model,
        "scores": args.scores,
        "allocator": args.allocator,
        "sparsity": p,
        "alpha": alpha,
        "aggregator": args.aggregator,
        "granularity": args.granularity,
        "nm": args.nm,
        "owl_multiplier": args.owl_multiplier,
        "out": args.out,
    }
    outs = _out_paths(args.out, ".alloc.json")
    _refuse_overwrite(outs, args.force)

    if args.allocator in ("lamp", "global"):
        raise InvalidConfig(
            f"{args.allocator} produces masks directly; run `prune --allocator {args.allocator}`"
        )
    if args.allocator in ("dlp", "owl") and not args.scores:
        raise InvalidConfig(f"--allocator {args.allocator} needs --scores")

    if args.allocator == "dlp":
        scores = metrics.load_scores(args.scores)
        s = unimportance(model, scores, args.granularity, AGGREGATORS[args.aggregator])
        imp = rid(s)
        if args.nm is not None:
            scheme = nm_allocate(imp, args.nm, p, alpha)
            alloc = nm_to_allocation(scheme, p, alpha, granularity=args.granularity)
        else:
            alloc = dlp_allocate(imp, DlpConfig(p, alpha))
        alloc.metadata["metric"] = scores.metric
        alloc.metadata["aggregator"] = args.aggregator
    elif args.allocator == "owl":
        if args.nm is not None:
            raise InvalidConfig("--nm is only supported with --allocator dlp")
        scores = metrics.load_scores(args.scores)
        shares = evalbench.lod(scores, args.owl_multiplier, args.granularity)
        alloc = owl_allocate(shares, p, alpha, args.granularity)
        alloc.metadata["metric"] = scores.metric
        alloc.metadata["owl_multiplier"] = args.owl_multiplier
    elif args.allocator == "uniform":
        if args.nm is not None:
            raise InvalidConfig("--nm is only supported with --allocator dlp")
        alloc = uniform_allocate(model, p, args.granularity)
    else:  # er / er-plus
        if args.nm is not None:
            raise InvalidConfig("--nm is only supported with --allocator dlp")
        if args.granularity != PER_LAYER:
            raise InvalidConfig(f"{args.allocator} allocates per layer only")
        alloc = er_allocate(model, p, plus_variant=args.allocator == "er-plus")
    alloc.validate_against(model)
    alloc.metadata["config"] = resolved
    model_io.save_allocation(alloc, args.out)
    return {
        "config": resolved,
        "outputs": [str(p_) for p_ in outs],
        "entries": alloc.entries,
    }


def _cmd_prune(args) -> dict:
    model = model_io.load_model(args.model)
    resolved = {
        "command": "prune",
        "model": args.model,
        "scores": args.scores,
        "alloc": args.alloc,
        "allocator": args.allocator,
        "scope": args.scope,
        "sparsity": args.sparsity,
        "out": args.out,
    }
    outs = _out_paths(args.out, ".mask.json", ".mask.bin")
    _refuse_overwrite(outs, args.force)

    if args.allocator == "lamp":
        if args.sparsity is None:
            raise InvalidConfig("--allocator lamp needs --sparsity")
        masks = pruner.prune_lamp(model, args.sparsity)
    elif args.allocator == "global" or args.scope == "global":
        if args.sparsity is None:
            raise InvalidConfig("global pruning needs --sparsity")
        if not args.scores:
            raise InvalidConfig("global pruning needs --scores")
        masks = pruner.prune_global(metrics.load_scores(args.scores), args.sparsity)
    else:
        if not args.scores or not args.alloc:
            raise InvalidConfig("prune needs --scores and --alloc (or --allocator global/lamp)")
        scores = metrics.load_scores(args.scores)
        alloc = model_io.load_allocation(args.alloc, model)
        nm_meta = alloc.metadata.get("nm")
        if nm_meta:
            from .allocator import NMScheme

            scheme = NMScheme(
                m=int(nm_meta["m"]),
                per_layer_n=[int(v) for v in nm_meta["per_layer_n"]],
                units=list(alloc.entries),
                granularity=alloc.granularity,
            )
            masks = pruner.prune_nm(scores, scheme)
        else:
            masks = pruner.prune_unstructured(scores, alloc, SCOPES[args.scope], model)
    model_io.save_masks(masks, args.out, extra=resolved)
    total = sum(bm.numel for bm in masks.blocks.values())
    zeros = sum(bm.zero_count for bm in masks.blocks.values())
    return {
        "config": resolved,
        "outputs": [str(p) for p in outs],
        "achieved_sparsity": zeros / total if total else 0.0,
    }


def _cmd_eval(args) -> dict:
    model = model_io.load_model(args.model)
    masks = model_io.load_masks(args.mask)
    alloc = model_io.load_allocation(args.alloc, model)
    batch = model_io.load_batch(args.batch)
    calib = model_io.load_calib(args.calib) if args.calib else None
    resolved = {
        "command": "eval",
        "model": args.model,
        "mask": args.mask,
        "alloc": args.alloc,
        "batch": args.batch,
        "calib": args.calib,
        "metric": args.metric,
        "outlier_multiplier": args.outlier_multiplier,
        "seed": _seed_of(args.model),
        "out": args.out,
    }
    outs = _out_paths(args.out, ".report.json", ".report.csv")
    _refuse_overwrite(outs, args.force)
    post = metrics.masked_scores(model, masks, args.metric, calib=calib)
    report = evalbench.build_report(
        model,
        masks,
        alloc,
        batch,
        post,
        multiplier=args.outlier_multiplier,
        extra={"metric": args.metric, "seed": resolved["seed"]},
    )
    report["config"] = resolved
    evalbench.write_report(report, args.out)
    return {"config": resolved, "outputs": [str(p) for p in outs], "global": report["global"]}


def _cmd_lod(args) -> dict:
    model = model_io.load_model(args.model)
    calib = model_io.load_calib(args.calib) if args.calib else None
    resolved = {
        "command": "lod",
        "model": args.model,
        "calib": args.calib,
        "mask": args.mask,
        "metric": args.metric,
        "outlier_multiplier": args.outlier_multiplier,
        "granularity": args.granularity,
        "out": args.out,
    }
    if args.mask:
        masks = model_io.load_masks(args.mask)
        scores = metrics.masked_scores(model, masks, args.metric, calib=calib)
    else:
        scores = metrics.score_model(model, args.metric, calib=calib)
    shares = evalbench.lod(scores, args.outlier_multiplier, args.granularity)
    numels = _unit_numels(model, args.granularity)
    doc = {
        "config": resolved,
        "per_unit": shares,
        "summary": evalbench.lod_summary(shares, numels),
    }
    if args.out:
        out = Path(args.out)
        _refuse_overwrite([out], args.force)
        out.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return doc


def _cmd_compare(args) -> dict:
    model = model_io.load_model(args.model)
    calib = model_io.load_calib(args.calib)
    batch = model_io.load_batch(args.batch)
    p = args.sparsity
    alpha = args.alpha if args.alpha is not None else default_alpha(p)
    chosen = [a.strip() for a in args.allocators.split(",") if a.strip()]
    for a in chosen:
        if a not in ALLOCATORS:
            raise InvalidConfig(f"unknown allocator {a!r}")
    resolved = {
        "command": "compare",
        "model": args.model,
        "calib": args.calib,
        "batch": args.batch,
        "sparsity": p,
        "alpha": alpha,
        "metric": args.metric,
        "aggregator": args.aggregator,
        "scope": args.scope,
        "allocators": chosen,
        "owl_multiplier": args.owl_multiplier,
        "seed": _seed_of(args.model),
        "out": args.out,
    }
    out_csv = Path(args.out if args.out.endswith(".csv") else args.out + ".csv")
    _refuse_overwrite([out_csv], args.force)

    scores = metrics.score_model(model, args.metric, calib=calib)
    scope = SCOPES[args.scope]
    rows: List[dict] = []
    summary: dict = {}
    for name in chosen:
        if name == "dlp":
            imp = rid(unimportance(model, scores, PER_LAYER, AGGREGATORS[args.aggregator]))
            alloc = dlp_allocate(imp, DlpConfig(p, alpha))
            masks = pruner.prune_unstructured(scores, alloc, scope, model)
        elif name == "uniform":
            alloc = uniform_allocate(model, p)
            masks = pruner.prune_unstructured(scores, alloc, scope, model)
        elif name == "owl":
            shares = evalbench.lod(scores, args.owl_multiplier, PER_LAYER)
            alloc = owl_allocate(shares, p, alpha, PER_LAYER)
            masks = pruner.prune_unstructured(scores, alloc, scope, model)
        elif name in ("er", "er-plus"):
            alloc = er_allocate(model, p, plus_variant=name == "er-plus")
            masks = pruner.prune_unstructured(scores, alloc, scope, model)
        elif name == "global":
            masks = pruner.prune_global(scores, p)
            alloc = _induced_allocation(model, masks, "global", p)
        else:  # lamp
            masks = pruner.prune_lamp(model, p)
            alloc = _induced_allocation(model, masks, "lamp", p)
        post = metrics.masked_scores(model, masks, args.metric, calib=calib)
        report = evalbench.build_report(
            model, masks, alloc, batch, post, multiplier=args.owl_multiplier
        )
        for row in report["units"]:
            rows.append({"allocator": name, "kind": "unit", **row})
        rows.append({"allocator": name, "kind": "global", **report["global"]})
        summary[name] = {
            "divergence": report["global"]["divergence"],
            "achieved_sparsity": report["global"]["achieved_sparsity"],
            "lod_pooled": report["global"]["lod_pooled"],
        }
    _write_compare_csv(out_csv, rows)
    return {"config": resolved, "outputs": [str(out_csv)], "summary": summary}


def _induced_allocation(model, masks, name: str, p: float):
    """Per-layer sparsities implied by direct-mask baselines, reported post hoc."""
    from .model_io import Allocation

    entries = {}
    for layer in model.layers:
        zeros = sum(masks.for_block(layer.name, b.name).zero_count for b in layer.blocks)
        numel = sum(b.numel for b in layer.blocks)
        entries[layer.name] = zeros / numel
    return Allocation(
        granularity=PER_LAYER,
        entries=entries,
        importance={},
        metadata={"allocator": name, "target_sparsity": p, "induced": True},
    )


def _write_compare_csv(path: Path, rows: List[dict]) -> None:
    cols = [
        "allocator",
        "kind",
        "unit",
        "requested_sparsity",
        "achieved_sparsity",
        "importance",
        "lod",
        "reconstruction_error",
        "divergence",
        "lod_pooled",
    ]
    lines = [",".join(cols)]
    for row in rows:
        cells = []
        for c in cols:
            v = row.get(c)
            if v is None:
                cells.append("")
            elif isinstance(v, str):
                cells.append(v)
            elif isinstance(v, bool):
                cells.append(str(int(v)))
            elif isinstance(v, (int, np.integer)):
                cells.append(str(int(v)))
            else:
                cells.append(repr(float(v)))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _unit_numels(model, granularity: str) -> dict:
    out = {}
    for layer, block in model.blocks():
        unit = model_io.unit_of(granularity, layer.name, block.name)
        out[unit] = out.get(unit, 0) + block.numel
    return out


def _seed_of(model_path) -> Optional[int]:
    """Seed recorded by `gen` in the model manifest, if present."""
    try:
        doc = json.loads(_with(stem_of(model_path), ".model.json").read_text(encoding="utf-8"))
        return doc.get("config", {}).get("seed")
    except (OSError, json.JSONDecodeError):
        return None


if __name__ == "__main__":
    sys.exit(main())

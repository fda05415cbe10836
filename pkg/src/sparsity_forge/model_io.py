"""Bit-exact serialization of models, calibration stats, allocations, masks.

Every artifact is a JSON manifest plus (where needed) one raw blob of
little-endian float32, so the bytes stay auditable with a hex editor.
Masks are bit-packed row-major, least-significant-bit first within each
byte; trailing pad bits must be zero. Loading never repairs: every
inconsistency raises its named error.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from .errors import (
    AsymmetricGram,
    CoverageGap,
    DimMismatch,
    DuplicateName,
    GramDiagMismatch,
    InvalidConfig,
    ManifestMismatch,
    NonFiniteWeight,
    PopcountMismatch,
    UnknownUnit,
)

F32 = "<f4"
ACTIVATIONS = ("identity", "relu")

PER_LAYER = "per-layer"
PER_BLOCK = "per-block"

GRAM_SYM_ATOL = 1e-5
NORM_DIAG_RTOL = 1e-4

PathLike = Union[str, Path]
BlockKey = Tuple[str, str]


# ---------------------------------------------------------------------------
# domain types


@dataclass
class Block:
    name: str
    weights: np.ndarray  # float32, shape (rows, cols), row-major

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float32)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise InvalidConfig(f"block {self.name!r} must be a 2-D matrix, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise NonFiniteWeight(f"block {self.name!r} has NaN/Inf weights")
        self.weights = w

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def cols(self) -> int:
        return self.weights.shape[1]

    @property
    def numel(self) -> int:
        return self.weights.size


@dataclass
class Layer:
    name: str
    activation: str
    blocks: List[Block]

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidConfig(f"layer {self.name!r}: unknown activation {self.activation!r}")
        seen = set()
        for b in self.blocks:
            if b.name in seen:
                raise DuplicateName(f"block {b.name!r} duplicated in layer {self.name!r}")
            seen.add(b.name)


@dataclass
class Model:
    layers: List[Layer]

    def __post_init__(self):
        seen = set()
        for layer in self.layers:
            if layer.name in seen:
                raise DuplicateName(f"layer {layer.name!r} duplicated")
            seen.add(layer.name)

    def blocks(self) -> Iterator[Tuple[Layer, Block]]:
        for layer in self.layers:
            for b in layer.blocks:
                yield layer, b

    def block_keys(self) -> List[BlockKey]:
        return [(layer.name, b.name) for layer, b in self.blocks()]

    def get_block(self, layer_name: str, block_name: str) -> Block:
        for layer, b in self.blocks():
            if layer.name == layer_name and b.name == block_name:
                return b
        raise CoverageGap(f"no block {layer_name!r}/{block_name!r} in model")

    def total_weights(self) -> int:
        return sum(b.numel for _, b in self.blocks())

    def unit_ids(self, granularity: str) -> List[str]:
        if granularity == PER_LAYER:
            return [layer.name for layer in self.layers]
        if granularity == PER_BLOCK:
            return [f"{layer.name}/{b.name}" for layer, b in self.blocks()]
        raise InvalidConfig(f"unknown granularity {granularity!r}")


def unit_of(granularity: str, layer_name: str, block_name: str) -> str:
    """Allocation-unit id that owns the given block."""
    if granularity == PER_LAYER:
        return layer_name
    if granularity == PER_BLOCK:
        return f"{layer_name}/{block_name}"
    raise InvalidConfig(f"unknown granularity {granularity!r}")


@dataclass
class BlockCalib:
    col_norms: np.ndarray  # float32, length = block cols
    gram: Optional[np.ndarray]  # float32, (cols, cols), or None
    sample_count: int

    def __post_init__(self):
        cn = np.ascontiguousarray(self.col_norms, dtype=np.float32).ravel()
        if not np.all(np.isfinite(cn)) or np.any(cn < 0):
            raise InvalidConfig("col_norms must be finite and nonnegative")
        self.col_norms = cn
        if self.sample_count < 1:
            raise InvalidConfig("sample_count must be >= 1")
        if self.gram is not None:
            g = np.ascontiguousarray(self.gram, dtype=np.float32)
            c = cn.size
            if g.shape != (c, c):
                raise DimMismatch(f"gram shape {g.shape} where {(c, c)} expected")
            if not np.all(np.isfinite(g)):
                raise InvalidConfig("gram must be finite")
            asym = np.max(np.abs(g - g.T)) if c else 0.0
            if asym > GRAM_SYM_ATOL:
                raise AsymmetricGram(f"max |G - G^T| = {asym:g} exceeds {GRAM_SYM_ATOL:g}")
            diag = np.diag(g).astype(np.float64)
            if np.any(diag < 0):
                raise GramDiagMismatch("gram diagonal has negative entries")
            cn2 = cn.astype(np.float64) ** 2
            scale = np.maximum(np.maximum(np.abs(diag), np.abs(cn2)), 1e-12)
            rel = np.max(np.abs(cn2 - diag) / scale)
            if rel > NORM_DIAG_RTOL:
                raise GramDiagMismatch(
                    f"col_norms^2 vs gram diagonal differ by {rel:g} relative (> {NORM_DIAG_RTOL:g})"
                )
            self.gram = g


@dataclass
class CalibStats:
    entries: Dict[BlockKey, BlockCalib] = field(default_factory=dict)

    def for_block(self, layer_name: str, block_name: str) -> BlockCalib:
        key = (layer_name, block_name)
        if key not in self.entries:
            raise CoverageGap(f"no calibration stats for {layer_name!r}/{block_name!r}")
        return self.entries[key]


@dataclass
class Allocation:
    granularity: str
    entries: Dict[str, float]  # unit id -> sparsity R in [0, 1]
    importance: Dict[str, float] = field(default_factory=dict)
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.granularity not in (PER_LAYER, PER_BLOCK):
            raise InvalidConfig(f"unknown granularity {self.granularity!r}")
        for unit, r in self.entries.items():
            if not (0.0 <= float(r) <= 1.0) or not math.isfinite(float(r)):
                raise InvalidConfig(f"unit {unit!r}: sparsity {r} outside [0, 1]")

    def validate_against(self, model: Model) -> None:
        model_units = model.unit_ids(self.granularity)
        extra = [u for u in self.entries if u not in set(model_units)]
        if extra:
            raise UnknownUnit(f"allocation names units absent from the model: {extra[:3]}")
        missing = [u for u in model_units if u not in self.entries]
        if missing:
            raise CoverageGap(f"allocation missing units: {missing[:3]}")

    def ratio_for_block(self, layer_name: str, block_name: str) -> float:
        unit = unit_of(self.granularity, layer_name, block_name)
        if unit not in self.entries:
            raise CoverageGap(f"no allocation entry for unit {unit!r}")
        return float(self.entries[unit])


@dataclass
class BlockMask:
    rows: int
    cols: int
    bits: np.ndarray  # uint8, packed row-major LSB-first
    kept_count: int

    def __post_init__(self):
        numel = self.rows * self.cols
        nbytes = (numel + 7) // 8
        bits = np.ascontiguousarray(self.bits, dtype=np.uint8).ravel()
        if bits.size != nbytes:
            raise ManifestMismatch(f"mask blob is {bits.size} bytes, expected {nbytes}")
        flat = np.unpackbits(bits, bitorder="little")
        if flat[numel:].any():
            raise ManifestMismatch("mask pad bits must be zero")
        pop = int(flat[:numel].sum())
        if pop != self.kept_count:
            raise PopcountMismatch(f"declared kept_count {self.kept_count}, popcount {pop}")
        self.bits = bits

    @classmethod
    def from_bool(cls, keep: np.ndarray) -> "BlockMask":
        keep = np.asarray(keep, dtype=bool)
        if keep.ndim != 2:
            raise InvalidConfig("mask must be 2-D")
        bits = np.packbits(keep.astype(np.uint8).ravel(), bitorder="little")
        return cls(rows=keep.shape[0], cols=keep.shape[1], bits=bits, kept_count=int(keep.sum()))

    def to_bool(self) -> np.ndarray:
        numel = self.rows * self.cols
        flat = np.unpackbits(self.bits, count=numel, bitorder="little")
        return flat.astype(bool).reshape(self.rows, self.cols)

    @property
    def numel(self) -> int:
        return self.rows * self.cols

    @property
    def zero_count(self) -> int:
        return self.numel - self.kept_count


@dataclass
class MaskSet:
    blocks: Dict[BlockKey, BlockMask] = field(default_factory=dict)

    def for_block(self, layer_name: str, block_name: str) -> BlockMask:
        key = (layer_name, block_name)
        if key not in self.blocks:
            raise CoverageGap(f"no mask for {layer_name!r}/{block_name!r}")
        return self.blocks[key]


# ---------------------------------------------------------------------------
# container plumbing

_SUFFIXES = (
    ".model.json", ".model.bin",
    ".calib.json", ".calib.bin",
    ".alloc.json",
    ".mask.json", ".mask.bin",
    ".score.json", ".score.bin",
    ".batch.json", ".batch.bin",
    ".report.json", ".report.csv",
)


def _with(stem: Path, suffix: str) -> Path:
    return stem.parent / (stem.name + suffix)


def stem_of(path: PathLike) -> Path:
    """Strip a known artifact suffix so callers may pass either form."""
    s = str(path)
    for suf in _SUFFIXES:
        if s.endswith(suf):
            return Path(s[: -len(suf)])
    return Path(s)


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _read_json(path: Path, expect_format: str) -> dict:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestMismatch(f"{path}: {e}") from e
    if doc.get("format") != expect_format:
        raise ManifestMismatch(f"{path}: format {doc.get('format')!r}, expected {expect_format!r}")
    return doc


def _blob_slice(blob: bytes, offset: int, count: int, path: Path) -> np.ndarray:
    end = offset + 4 * count
    if offset < 0 or end > len(blob):
        raise ManifestMismatch(f"{path}: blob range [{offset}, {end}) outside {len(blob)} bytes")
    return np.frombuffer(blob, dtype=F32, count=count, offset=offset).copy()


# ---------------------------------------------------------------------------
# model files


def save_model(
    model: Model, path: PathLike, extra: Optional[dict] = None
) -> Tuple[Path, Path]:
    stem = stem_of(path)
    manifest: dict = {"format": "sparsity-forge/model", "version": 1, "dtype": F32, "layers": []}
    if extra:
        manifest["config"] = extra
    chunks: List[bytes] = []
    offset = 0
    for layer in model.layers:
        entry = {"name": layer.name, "activation": layer.activation, "blocks": []}
        for b in layer.blocks:
            raw = np.ascontiguousarray(b.weights, dtype=F32).tobytes()
            entry["blocks"].append(
                {"name": b.name, "rows": b.rows, "cols": b.cols, "offset": offset}
            )
            chunks.append(raw)
            offset += len(raw)
        manifest["layers"].append(entry)
    json_path, bin_path = _with(stem, ".model.json"), _with(stem, ".model.bin")
    _write_json(json_path, manifest)
    bin_path.write_bytes(b"".join(chunks))
    return json_path, bin_path


def load_model(path: PathLike) -> Model:
    stem = stem_of(path)
    manifest = _read_json(_with(stem, ".model.json"), "sparsity-forge/model")
    blob = _with(stem, ".model.bin").read_bytes()
    declared = 0
    layers: List[Layer] = []
    for lent in manifest.get("layers", []):
        blocks: List[Block] = []
        for bent in lent.get("blocks", []):
            rows, cols, offset = int(bent["rows"]), int(bent["cols"]), int(bent["offset"])
            if rows < 1 or cols < 1:
                raise ManifestMismatch(f"block {bent.get('name')!r}: bad shape {rows}x{cols}")
            data = _blob_slice(blob, offset, rows * cols, _with(stem, ".model.bin"))
            declared += rows * cols * 4
            w = data.reshape(rows, cols)
            if not np.all(np.isfinite(w)):
                raise NonFiniteWeight(f"block {bent.get('name')!r} has NaN/Inf weights")
            blocks.append(Block(name=str(bent["name"]), weights=w))
        act = str(lent.get("activation", "identity"))
        if act not in ACTIVATIONS:
            raise ManifestMismatch(f"layer {lent.get('name')!r}: unknown activation {act!r}")
        layers.append(Layer(name=str(lent["name"]), activation=act, blocks=blocks))
    if declared != len(blob):
        raise ManifestMismatch(f"manifest declares {declared} blob bytes, file has {len(blob)}")
    return Model(layers=layers)


# ---------------------------------------------------------------------------
# calibration files


def save_calib(
    calib: CalibStats, path: PathLike, extra: Optional[dict] = None
) -> Tuple[Path, Path]:
    stem = stem_of(path)
    manifest: dict = {"format": "sparsity-forge/calib", "version": 1, "dtype": F32, "blocks": []}
    if extra:
        manifest["config"] = extra
    chunks: List[bytes] = []
    offset = 0
    for (layer_name, block_name), bc in calib.entries.items():
        cols = int(bc.col_norms.size)
        entry = {
            "layer": layer_name,
            "block": block_name,
            "cols": cols,
            "sample_count": int(bc.sample_count),
            "col_norms_offset": offset,
            "gram_offset": None,
        }
        raw = np.ascontiguousarray(bc.col_norms, dtype=F32).tobytes()
        chunks.append(raw)
        offset += len(raw)
        if bc.gram is not None:
            entry["gram_offset"] = offset
            raw = np.ascontiguousarray(bc.gram, dtype=F32).tobytes()
            chunks.append(raw)
            offset += len(raw)
        manifest["blocks"].append(entry)
    json_path, bin_path = _with(stem, ".calib.json"), _with(stem, ".calib.bin")
    _write_json(json_path, manifest)
    bin_path.write_bytes(b"".join(chunks))
    return json_path, bin_path


def load_calib(path: PathLike) -> CalibStats:
    stem = stem_of(path)
    manifest = _read_json(_with(stem, ".calib.json"), "sparsity-forge/calib")
    bin_path = _with(stem, ".calib.bin")
    blob = bin_path.read_bytes()
    entries: Dict[BlockKey, BlockCalib] = {}
    expected = 0
    for bent in manifest.get("blocks", []):
        cols = int(bent["cols"])
        cn = _blob_slice(blob, int(bent["col_norms_offset"]), cols, bin_path)
        expected += cols * 4
        gram = None
        if bent.get("gram_offset") is not None:
            gram = _blob_slice(blob, int(bent["gram_offset"]), cols * cols, bin_path)
            gram = gram.reshape(cols, cols)
            expected += cols * cols * 4
        key = (str(bent["layer"]), str(bent["block"]))
        if key in entries:
            raise DuplicateName(f"calib block {key} duplicated")
        entries[key] = BlockCalib(col_norms=cn, gram=gram, sample_count=int(bent["sample_count"]))
    if expected != len(blob):
        raise ManifestMismatch(f"manifest declares {expected} blob bytes, file has {len(blob)}")
    return CalibStats(entries=entries)


# ---------------------------------------------------------------------------
# allocation files (pure JSON)


def save_allocation(alloc: Allocation, path: PathLike) -> Path:
    stem = stem_of(path)
    doc = {
        "format": "sparsity-forge/alloc",
        "version": 1,
        "granularity": alloc.granularity,
        "entries": {u: float(r) for u, r in alloc.entries.items()},
        "importance": {u: float(v) for u, v in alloc.importance.items()},
        "metadata": alloc.metadata,
    }
    json_path = _with(stem, ".alloc.json")
    _write_json(json_path, doc)
    return json_path


def load_allocation(path: PathLike, model: Optional[Model] = None) -> Allocation:
    stem = stem_of(path)
    doc = _read_json(_with(stem, ".alloc.json"), "sparsity-forge/alloc")
    alloc = Allocation(
        granularity=str(doc.get("granularity", PER_LAYER)),
        entries={str(u): float(r) for u, r in doc.get("entries", {}).items()},
        importance={str(u): float(v) for u, v in doc.get("importance", {}).items()},
        metadata=dict(doc.get("metadata", {})),
    )
    if model is not None:
        alloc.validate_against(model)
    return alloc


# ---------------------------------------------------------------------------
# mask files


def save_masks(
    masks: MaskSet, path: PathLike, extra: Optional[dict] = None
) -> Tuple[Path, Path]:
    stem = stem_of(path)
    manifest: dict = {"format": "sparsity-forge/mask", "version": 1, "blocks": []}
    if extra:
        manifest["config"] = extra
    chunks: List[bytes] = []
    offset = 0
    for (layer_name, block_name), bm in masks.blocks.items():
        manifest["blocks"].append(
            {
                "layer": layer_name,
                "block": block_name,
                "rows": bm.rows,
                "cols": bm.cols,
                "offset": offset,
                "kept_count": bm.kept_count,
            }
        )
        raw = bm.bits.tobytes()
        chunks.append(raw)
        offset += len(raw)
    json_path, bin_path = _with(stem, ".mask.json"), _with(stem, ".mask.bin")
    _write_json(json_path, manifest)
    bin_path.write_bytes(b"".join(chunks))
    return json_path, bin_path


def load_masks(path: PathLike) -> MaskSet:
    stem = stem_of(path)
    manifest = _read_json(_with(stem, ".mask.json"), "sparsity-forge/mask")
    bin_path = _with(stem, ".mask.bin")
    blob = bin_path.read_bytes()
    blocks: Dict[BlockKey, BlockMask] = {}
    expected = 0
    for bent in manifest.get("blocks", []):
        rows, cols = int(bent["rows"]), int(bent["cols"])
        nbytes = (rows * cols + 7) // 8
        offset = int(bent["offset"])
        if offset < 0 or offset + nbytes > len(blob):
            raise ManifestMismatch(f"{bin_path}: mask range outside blob")
        bits = np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=offset).copy()
        key = (str(bent["layer"]), str(bent["block"]))
        if key in blocks:
            raise DuplicateName(f"mask block {key} duplicated")
        blocks[key] = BlockMask(rows=rows, cols=cols, bits=bits, kept_count=int(bent["kept_count"]))
        expected += nbytes
    if expected != len(blob):
        raise ManifestMismatch(f"manifest declares {expected} blob bytes, file has {len(blob)}")
    return MaskSet(blocks=blocks)


# ---------------------------------------------------------------------------
# raw activation batches (same container idiom; used by the eval harness)


def save_batch(
    batch: np.ndarray, path: PathLike, extra: Optional[dict] = None
) -> Tuple[Path, Path]:
    stem = stem_of(path)
    x = np.ascontiguousarray(batch, dtype=np.float32)
    if x.ndim != 2:
        raise InvalidConfig("batch must be a 2-D (samples x features) matrix")
    if not np.all(np.isfinite(x)):
        raise NonFiniteWeight("batch has NaN/Inf entries")
    manifest = {
        "format": "sparsity-forge/batch",
        "version": 1,
        "dtype": F32,
        "rows": int(x.shape[0]),
        "cols": int(x.shape[1]),
    }
    if extra:
        manifest["config"] = extra
    json_path, bin_path = _with(stem, ".batch.json"), _with(stem, ".batch.bin")
    _write_json(json_path, manifest)
    bin_path.write_bytes(x.tobytes())
    return json_path, bin_path


def load_batch(path: PathLike) -> np.ndarray:
    stem = stem_of(path)
    manifest = _read_json(_with(stem, ".batch.json"), "sparsity-forge/batch")
    bin_path = _with(stem, ".batch.bin")
    blob = bin_path.read_bytes()
    rows, cols = int(manifest["rows"]), int(manifest["cols"])
    if rows * cols * 4 != len(blob):
        raise ManifestMismatch(f"batch blob is {len(blob)} bytes, expected {rows * cols * 4}")
    return _blob_slice(blob, 0, rows * cols, bin_path).reshape(rows, cols)

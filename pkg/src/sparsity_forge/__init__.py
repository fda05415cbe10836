"""Pruning toolkit: saliency metrics, median-driven layerwise sparsity
allocation, baseline allocators, mask materialization, and diagnostics for
desk-scale layered linear models."""

from .allocator import (
    ALPHA_TABLE,
    DlpConfig,
    NMScheme,
    default_alpha,
    dlp_allocate,
    er_allocate,
    nm_allocate,
    nm_to_allocation,
    owl_allocate,
    uniform_allocate,
)
from .errors import ForgeError
from .evalbench import (
    SynthConfig,
    audit,
    build_report,
    default_config,
    divergence,
    forward,
    gen_synthetic,
    lod,
    lod_summary,
    outlier_schedule,
    reconstruction_error,
    write_report,
)
from .importance import ImportanceVector, UnimportanceVector, rid, unimportance
from .metrics import (
    ScoreSet,
    build_calib_stats,
    default_damping,
    load_scores,
    magnitude_scores,
    masked_scores,
    save_scores,
    score_model,
    sparsegpt_scores,
    wanda_scores,
)
from .model_io import (
    PER_BLOCK,
    PER_LAYER,
    Allocation,
    Block,
    BlockCalib,
    BlockMask,
    CalibStats,
    Layer,
    MaskSet,
    Model,
    load_allocation,
    load_batch,
    load_calib,
    load_masks,
    load_model,
    save_allocation,
    save_batch,
    save_calib,
    save_masks,
    save_model,
)
from .pruner import (
    SelectionScope,
    apply_masks,
    lamp_scores_block,
    prune_global,
    prune_lamp,
    prune_nm,
    prune_unstructured,
)
from .stats import Aggregator, aggregate, rank_smallest

__version__ = "0.1.0"

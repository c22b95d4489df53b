"""Three-stage leaf classification cascade on a from-scratch numpy CNN runtime."""
from .cascade import (CascadeConfig, CascadeOutcome, Decided, Defer, EvalReport, Plausible, StageKnowledge,
                      aggregate_patches, evaluate, preset, run_cascade, stage1_decide, stage2_decide, stage3_decide,
                      top_k)
from .kernels import BACKEND
from .netdef import (LayerSpec, LocalStage, NetworkDef, StageUnavailable, build_p_fallback, build_s_leafnet,
                     build_w_leafnet, count_params, forward)
from .preprocess import LeafImage, binarize, extract_patches

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CascadeConfig", "CascadeOutcome", "Decided", "Defer", "EvalReport", "LayerSpec", "LeafImage",
    "LocalStage", "NetworkDef", "Plausible", "StageKnowledge", "StageUnavailable", "aggregate_patches", "binarize",
    "build_p_fallback", "build_s_leafnet", "build_w_leafnet", "count_params", "evaluate", "extract_patches",
    "forward", "preset", "run_cascade", "stage1_decide", "stage2_decide", "stage3_decide", "top_k",
]

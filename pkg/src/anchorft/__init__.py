"""Dual-encoder contrastive finetuning with caption and retrieval anchors.

The package covers the full loop at desk scale: generate a synthetic
multi-domain benchmark, pretrain a two-tower encoder, finetune with anchor
regularizers, evaluate in-distribution / domain-shift / held-out-class
accuracy, and ensemble checkpoints by weight interpolation. `anchorft --help`
exposes the same pipeline as a CLI.
"""

from .anchors import (
    AnchorBatch,
    CandidateIndex,
    CandidatePair,
    CaptionRecord,
    CheckpointMismatchError,
    MissingAssignmentError,
    MissingCaptionError,
    RETRIEVAL_MODES,
    RetrievalAssignment,
    Sample,
    assemble_anchor_batch,
    attach_captions,
    build_candidate_index,
    retrieve,
)
from .benchgen import (
    BenchmarkBundle,
    GenConfig,
    RotationError,
    SynthCaptionProvider,
    generate_benchmark,
    random_rotation,
)
from .contrastive import (
    CheckReport,
    PairBatch,
    contrastive_loss,
    contrastive_loss_and_grads,
    grad_check,
)
from .encoders import (
    DualEncoderParams,
    EncoderParams,
    ParamGrads,
    encode,
    encode_batch,
    init_params,
    param_fingerprint,
)
from .evaluation import (
    EmptySplitError,
    EnsembleCurve,
    Metrics,
    PromptTable,
    SplitResult,
    build_prompt_classifier,
    classify,
    ensemble_sweep,
    ensemble_weights,
    evaluate_splits,
)
from .fileio import (
    BadMagicError,
    CodecError,
    FeatureSet,
    HashMismatchError,
    ManifestRecord,
    MissingFieldError,
    RowCountMismatchError,
    UnknownKeyError,
    VersionUnsupportedError,
    load_bundle,
    read_checkpoint,
    read_feature_set,
    write_bundle,
    write_checkpoint,
    write_feature_set,
)
from .numerics import RandomStream, ZeroVectorError, derive_seed, gaussian_stream, l2_normalize
from .training import (
    Checkpoint,
    EmptyFinetuneSetError,
    LOSS_TERMS,
    LossBreakdown,
    TrainConfig,
    checkpoint_id,
    config_fingerprint,
    make_checkpoint,
    pretrain,
    run_finetune,
)

__version__ = "0.1.0"

__all__ = [
    "AnchorBatch",
    "BadMagicError",
    "BenchmarkBundle",
    "CandidateIndex",
    "CandidatePair",
    "CaptionRecord",
    "CheckReport",
    "Checkpoint",
    "CheckpointMismatchError",
    "CodecError",
    "DualEncoderParams",
    "EmptyFinetuneSetError",
    "EmptySplitError",
    "EncoderParams",
    "EnsembleCurve",
    "FeatureSet",
    "GenConfig",
    "HashMismatchError",
    "LOSS_TERMS",
    "LossBreakdown",
    "ManifestRecord",
    "Metrics",
    "MissingAssignmentError",
    "MissingCaptionError",
    "MissingFieldError",
    "PairBatch",
    "ParamGrads",
    "PromptTable",
    "RETRIEVAL_MODES",
    "RandomStream",
    "RetrievalAssignment",
    "RotationError",
    "RowCountMismatchError",
    "Sample",
    "SplitResult",
    "SynthCaptionProvider",
    "TrainConfig",
    "UnknownKeyError",
    "VersionUnsupportedError",
    "ZeroVectorError",
    "assemble_anchor_batch",
    "attach_captions",
    "build_candidate_index",
    "build_prompt_classifier",
    "checkpoint_id",
    "classify",
    "config_fingerprint",
    "contrastive_loss",
    "contrastive_loss_and_grads",
    "derive_seed",
    "encode",
    "encode_batch",
    "ensemble_sweep",
    "ensemble_weights",
    "evaluate_splits",
    "gaussian_stream",
    "generate_benchmark",
    "grad_check",
    "init_params",
    "l2_normalize",
    "load_bundle",
    "make_checkpoint",
    "param_fingerprint",
    "pretrain",
    "random_rotation",
    "read_checkpoint",
    "read_feature_set",
    "retrieve",
    "run_finetune",
    "write_bundle",
    "write_checkpoint",
    "write_feature_set",
]

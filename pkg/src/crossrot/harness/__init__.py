"""Training, evaluation, checkpointing and visualization exports."""

from .checkpoint import (
    FORMAT_VERSION,
    CheckpointError,
    CorruptFile,
    TrainState,
    VersionMismatch,
    load_checkpoint,
    save_checkpoint,
)
from .evaluate import (
    EmptySplit,
    MetricsRow,
    evaluate,
    random_rotation_baseline,
    summarize,
    write_metrics,
)
from .train import (
    LoadedPair,
    NanLoss,
    TrainConfig,
    batch_indices,
    load_pairs,
    toy_train_config,
    train,
)
from .visualize import (
    attention_received,
    bilinear_upsample,
    blend_heatmap,
    export_attention,
    export_footprints,
    heat_colormap,
    minmax_norm,
    predicted_absolute,
)

__all__ = [
    "FORMAT_VERSION", "CheckpointError", "CorruptFile", "TrainState",
    "VersionMismatch", "load_checkpoint", "save_checkpoint",
    "EmptySplit", "MetricsRow", "evaluate", "random_rotation_baseline",
    "summarize", "write_metrics",
    "LoadedPair", "NanLoss", "TrainConfig", "batch_indices", "load_pairs",
    "toy_train_config", "train",
    "attention_received", "bilinear_upsample", "blend_heatmap",
    "export_attention", "export_footprints", "heat_colormap", "minmax_norm",
    "predicted_absolute",
]

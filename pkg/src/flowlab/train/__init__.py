"""Training recipe: schedules, clipping, AdamW, losses and loops."""
from .losses import default_level_weights, downsample_flow, endpoint_error, loss_multiscale, loss_sequence
from .loop import (
    TrainingDiverged,
    TrainPlan,
    TrainRecord,
    batch_samples,
    compute_loss,
    finetune,
    latest_checkpoint,
    load_training_state,
    pretrain,
    run,
    save_training_state,
)
from .schedule import AdamW, GradientError, clip_gradients, global_norm, lr_at, peak_step

__all__ = [
    "AdamW", "GradientError", "TrainPlan", "TrainRecord", "TrainingDiverged",
    "batch_samples", "clip_gradients", "compute_loss", "default_level_weights",
    "downsample_flow", "endpoint_error", "finetune", "global_norm", "latest_checkpoint",
    "load_training_state", "loss_multiscale", "loss_sequence", "lr_at", "peak_step",
    "pretrain", "run", "save_training_state",
]

"""Masked-token training, low-rank adaptation and checkpoints."""

from .checkpoint import (
    MAGIC,
    VERSION,
    Checkpoint,
    CheckpointError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    bundle,
    load_checkpoint,
    save_checkpoint,
)
from .lora import QKV_TARGETS, LoraAdapter, LoraConfig, attach_lora, lora_param_count, merge_lora
from .loop import Batch, TrainConfig, Trainer, evaluate_masked_ce, masked_ce_loss, train_step
from ..numerics.optim import Adam, adam_step

__all__ = [
    "MAGIC", "VERSION", "Checkpoint", "CheckpointError", "CheckpointFormatError",
    "CheckpointTruncatedError", "CheckpointVersionError", "bundle", "load_checkpoint",
    "save_checkpoint", "QKV_TARGETS", "LoraAdapter", "LoraConfig", "attach_lora",
    "lora_param_count", "merge_lora", "Batch", "TrainConfig", "Trainer", "evaluate_masked_ce",
    "masked_ce_loss", "train_step", "Adam", "adam_step",
]

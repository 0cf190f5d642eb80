"""From-scratch numpy U-net: layers, model, optimiser, training, checkpoints."""

from segnl.nn.checkpoint import load_checkpoint, save_checkpoint
from segnl.nn.optim import Adam, adam_step
from segnl.nn.train import SliceSet, TrainConfig, TrainState, train
from segnl.nn.unet import (
    UNetConfig,
    UNetModel,
    loss_and_grads,
    predict_slices,
    predict_volume,
    segment_binary,
)

__all__ = [
    "Adam", "SliceSet", "TrainConfig", "TrainState", "UNetConfig", "UNetModel",
    "adam_step", "load_checkpoint", "loss_and_grads", "predict_slices", "predict_volume",
    "save_checkpoint", "segment_binary", "train",
]

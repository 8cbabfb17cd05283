"""Minimal numpy network engine for the CAE and RAE auto-encoders."""
from .layers import Conv3x3, Dense, Dropout, Flatten, MaxPool2x2, Softmax, Upsample2x2
from .network import (
    ActivationTrace,
    NetworkParams,
    NetworkSpec,
    TrainConfig,
    backward,
    build_architecture,
    cross_entropy,
    forward,
    init_params,
    joint_loss,
    l1_reconstruction_error,
    load_params,
    predict_batched,
    save_params,
    train_network,
)
from .optim import AdamState, adam_step

__all__ = [
    "ActivationTrace", "AdamState", "Conv3x3", "Dense", "Dropout", "Flatten",
    "MaxPool2x2", "NetworkParams", "NetworkSpec", "Softmax", "TrainConfig",
    "Upsample2x2", "adam_step", "backward", "build_architecture", "cross_entropy",
    "forward", "init_params", "joint_loss", "l1_reconstruction_error", "load_params",
    "predict_batched", "save_params", "train_network",
]

"""Minimal neural-network engine: layers, variant builders, and training."""

from .layers import (
    Param,
    conv2d,
    cross_entropy,
    dropout,
    global_avg_pool,
    linear,
    maxpool2x2,
    softmax,
)
from .network import (
    LayerKind,
    LayerSpec,
    Network,
    Variant,
    build_model,
    load_network,
    save_network,
    variant_specs,
)
from .train import AdamW, History, TrainConfig, adamw_step, fit, predict_labels

__all__ = [
    "AdamW",
    "History",
    "LayerKind",
    "LayerSpec",
    "Network",
    "Param",
    "TrainConfig",
    "Variant",
    "adamw_step",
    "build_model",
    "conv2d",
    "cross_entropy",
    "dropout",
    "fit",
    "global_avg_pool",
    "linear",
    "load_network",
    "maxpool2x2",
    "predict_labels",
    "save_network",
    "softmax",
    "variant_specs",
]

"""Heart-murmur detection toolkit.

STFT features with a PSD quality gate, three compact CNN variants trained by
a built-in numpy engine, MC-Dropout confidence scoring with selective
classification, patient-level vote aggregation, post-training int8
quantization, and a static resource estimator.
"""

from . import aggregate, dataset, dsp, metrics, quant, resources, uq
from .nn import Network, Variant, build_model, fit, load_network, save_network
from .pipeline import PipelineConfig

__version__ = "0.1.0"

__all__ = [
    "Network",
    "PipelineConfig",
    "Variant",
    "aggregate",
    "build_model",
    "dataset",
    "dsp",
    "fit",
    "load_network",
    "metrics",
    "quant",
    "resources",
    "save_network",
    "uq",
]

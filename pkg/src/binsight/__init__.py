"""Byte-image malware classification: encoders, a small numpy CNN, corpora,
metrics and a classification gateway."""
from .encoder import RawBinary, encode
from .errors import BinsightError
from .kernels import BACKEND
from .model import ModelConfig, build_model, load_model, model_summary, predict, predict_batch, save_model

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BinsightError",
    "ModelConfig",
    "RawBinary",
    "build_model",
    "encode",
    "load_model",
    "model_summary",
    "predict",
    "predict_batch",
    "save_model",
]

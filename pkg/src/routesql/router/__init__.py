"""db_id router: hashed n-gram features, softmax head, Adam training."""
from ._kernels import BACKEND as KERNEL_BACKEND
from .features import FeatureConfig, FeatureVector, featurize, tokenize
from .model import (
    ModelFormatError,
    RouterModel,
    TrainConfig,
    TrainingError,
    cross_entropy,
    cross_entropy_grad,
    gradient_check,
    predict_topk,
    softmax,
    train,
)

__all__ = [
    "KERNEL_BACKEND",
    "FeatureConfig",
    "FeatureVector",
    "ModelFormatError",
    "RouterModel",
    "TrainConfig",
    "TrainingError",
    "cross_entropy",
    "cross_entropy_grad",
    "featurize",
    "gradient_check",
    "predict_topk",
    "softmax",
    "tokenize",
    "train",
]

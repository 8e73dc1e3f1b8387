"""saliex: dense-connection saliency encoder, prediction-difference explainer
and saliency evaluation metrics, on a small numpy autodiff core."""

from .encoder import EncoderConfig, EncoderModel, TrainHyper, build_encoder, forward, train
from .explainer import ExplainConfig, explain, fse_stats

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig",
    "EncoderModel",
    "ExplainConfig",
    "TrainHyper",
    "build_encoder",
    "explain",
    "forward",
    "fse_stats",
    "train",
]

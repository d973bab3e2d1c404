"""Image-to-text translation for multimodal target sentiment classification.

The captioner turns an image into tokens; a sentence-pair encoder then reads
the sentence together with an auxiliary sentence made of target and caption
tokens. Everything runs on a small numpy autograd engine.
"""

from .data import MultimodalSample, generate_synthetic, synthetic_vocabulary
from .estimators import CaptionTransformer, FusionSentimentClassifier
from .fusion import FusionMode
from .tensor import Tensor, grad_check, no_grad, precision
from .text import Vocabulary
from .training import TrainConfig, load_checkpoint, pretrain_captioner, save_checkpoint, train_classifier

__version__ = "0.1.0"

__all__ = [
    "CaptionTransformer",
    "FusionMode",
    "FusionSentimentClassifier",
    "MultimodalSample",
    "Tensor",
    "TrainConfig",
    "Vocabulary",
    "generate_synthetic",
    "grad_check",
    "load_checkpoint",
    "no_grad",
    "precision",
    "pretrain_captioner",
    "save_checkpoint",
    "synthetic_vocabulary",
    "train_classifier",
]

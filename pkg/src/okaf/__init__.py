"""okaf: a desk-scale unified medical vision-language model in numpy.

One mixture-of-experts transformer reads text, semantic image tokens and
autoencoder latents in a single sequence.  It is trained with next-token
prediction and flow matching over a three-stage curriculum on a synthetic
corpus.
"""

from .errors import (ContractError, NumericError, OkafError, ParameterError, RoutingError, ScoringError,
                     ShapeError, ValidationError)
from .model import Image, ModalityTag, Mode, ModelConfig, TokenSequence, UnifiedModel
from .tensor import Tensor, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "ContractError", "Image", "ModalityTag", "Mode", "ModelConfig", "NumericError", "OkafError",
    "ParameterError", "RoutingError", "ScoringError", "ShapeError", "Tensor", "TokenSequence",
    "UnifiedModel", "ValidationError", "grad_check", "no_grad",
]

"""Desk-scale vision transformer: classifier with a random-feature GP head,
attention-alignment distillation, masked-autoencoder pretraining, and a
config-driven CLI.
"""

from .estimators import (
    DistilledVitClassifier,
    MaskedAutoencoderPretrainer,
    RandomFourierFeatures,
    VitClassifier,
)
from .heads import HeadConfig
from .vit import PRESETS, VitConfig, VitModel

__version__ = "0.1.0"

__all__ = [
    "DistilledVitClassifier",
    "HeadConfig",
    "MaskedAutoencoderPretrainer",
    "PRESETS",
    "RandomFourierFeatures",
    "VitClassifier",
    "VitConfig",
    "VitModel",
    "__version__",
]

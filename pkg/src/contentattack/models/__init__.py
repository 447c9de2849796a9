from .base import (Backend, Capabilities, Classifier, NoisePredictor, Registry, TorchClassifier,
                   TorchNoisePredictor, adapter_register, registry, require_differentiable)
from .toy import FitConfig, ToyBackendBundle, fit_toy_bundle

__all__ = [
    "Backend", "Capabilities", "Classifier", "NoisePredictor", "Registry", "TorchClassifier",
    "TorchNoisePredictor", "adapter_register", "registry", "require_differentiable",
    "FitConfig", "ToyBackendBundle", "fit_toy_bundle",
]

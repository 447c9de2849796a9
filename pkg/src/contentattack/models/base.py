"""Model interfaces, torch-backed implementations and the name registry."""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from ..errors import CapabilityError, InterfaceError, ParameterError, RegistrationError


@dataclass(frozen=True)
class Capabilities:
    differentiable: bool = True
    concurrent_safe: bool = False


class NoisePredictor(ABC):
    latent_shape: tuple
    embedding_shape: tuple
    capabilities: Capabilities = Capabilities()

    @abstractmethod
    def predict(self, z: torch.Tensor, t, e: torch.Tensor) -> torch.Tensor:
        """Predict the noise in ``z`` (shape ``(B, *latent_shape)``) at timestep ``t``."""


class Classifier(ABC):
    num_classes: int
    input_shape: tuple
    capabilities: Capabilities = Capabilities()

    @abstractmethod
    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """Class scores, shape ``(B, num_classes)`` for ``x`` of shape ``(B, *input_shape)``."""

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.logits(x).argmax(dim=-1)

    def input_gradient(self, x: torch.Tensor, y, loss_kind: str = "ce") -> torch.Tensor:
        """Gradient of the summed loss w.r.t. the input image(s)."""
        if not self.capabilities.differentiable:
            raise CapabilityError(f"{type(self).__name__} does not expose gradients")
        y = torch.as_tensor(y).reshape(-1)
        if torch.any(y < 0) or torch.any(y >= self.num_classes):
            raise ParameterError(f"label out of range [0, {self.num_classes})")
        x = x.detach().clone().requires_grad_(True)
        out = self.logits(x)
        if loss_kind == "ce":
            loss = F.cross_entropy(out, y.expand(out.shape[0]), reduction="sum")
        elif loss_kind == "margin":
            true = out.gather(1, y.expand(out.shape[0])[:, None]).squeeze(1)
            other = out.scatter(1, y.expand(out.shape[0])[:, None], float("-inf")).amax(1)
            loss = (other - true).sum()
        else:
            raise ParameterError(f"unknown loss kind {loss_kind!r}")
        (grad,) = torch.autograd.grad(loss, x)
        return grad


class TorchNoisePredictor(NoisePredictor):
    """Adapts an ``nn.Module`` with signature ``module(z, t, e)``."""

    def __init__(self, module: torch.nn.Module, latent_shape, embedding_shape,
                 capabilities: Capabilities = Capabilities()):
        self.module = module.eval()
        self.latent_shape = tuple(latent_shape)
        self.embedding_shape = tuple(embedding_shape)
        self.capabilities = capabilities

    def predict(self, z, t, e):
        if tuple(z.shape[1:]) != self.latent_shape:
            raise InterfaceError(f"latent shape {tuple(z.shape)} != (B, *{self.latent_shape})")
        if tuple(e.shape[-len(self.embedding_shape):]) != self.embedding_shape:
            raise InterfaceError(f"embedding shape {tuple(e.shape)} != {self.embedding_shape}")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(z.shape[0])
        if e.ndim == len(self.embedding_shape):
            e = e.unsqueeze(0)
        e = e.expand(z.shape[0], *self.embedding_shape)
        return self.module(z, t, e)


class TorchClassifier(Classifier):
    def __init__(self, module: torch.nn.Module, num_classes: int, input_shape,
                 capabilities: Capabilities = Capabilities()):
        self.module = module.eval()
        self.num_classes = int(num_classes)
        self.input_shape = tuple(input_shape)
        self.capabilities = capabilities

    def logits(self, x):
        if tuple(x.shape[-len(self.input_shape):]) != self.input_shape:
            raise InterfaceError(f"input shape {tuple(x.shape)} != (B, *{self.input_shape})")
        squeeze = x.ndim == len(self.input_shape)
        out = self.module(x.unsqueeze(0) if squeeze else x)
        return out[0] if squeeze else out


@dataclass
class Backend:
    """A text-to-image diffusion backend: noise predictor plus prompt embedder and codec.

    ``encode``/``decode`` map images in [0, 1] to latents and back; both must be
    differentiable when the backend is used for attacks.
    """
    noise_predictor: NoisePredictor
    embed: Callable[[str], torch.Tensor]
    encode: Callable[[torch.Tensor], torch.Tensor]
    decode: Callable[[torch.Tensor], torch.Tensor]
    image_shape: tuple

    @property
    def capabilities(self) -> Capabilities:
        return self.noise_predictor.capabilities

    def null_embedding(self) -> torch.Tensor:
        return self.embed("")


class Registry:
    def __init__(self):
        self.backends: dict[str, Backend] = {}
        self.classifiers: dict[str, Classifier] = {}

    def register(self, name: str, descriptor):
        if name in self.backends or name in self.classifiers:
            raise RegistrationError(f"name {name!r} is already registered")
        if isinstance(descriptor, Backend):
            npred = descriptor.noise_predictor
            for attr in ("latent_shape", "embedding_shape", "capabilities"):
                if getattr(npred, attr, None) is None:
                    raise RegistrationError(f"backend {name!r} does not declare {attr}")
            self.backends[name] = descriptor
        elif isinstance(descriptor, Classifier):
            for attr in ("num_classes", "input_shape", "capabilities"):
                if getattr(descriptor, attr, None) is None:
                    raise RegistrationError(f"classifier {name!r} does not declare {attr}")
            self.classifiers[name] = descriptor
        else:
            raise RegistrationError(f"cannot register {type(descriptor).__name__} as {name!r}")
        return descriptor

    def backend(self, name: str) -> Backend:
        try:
            return self.backends[name]
        except KeyError:
            raise RegistrationError(f"unknown backend {name!r}; registered: {sorted(self.backends)}") from None

    def classifier(self, name: str) -> Classifier:
        try:
            return self.classifiers[name]
        except KeyError:
            raise RegistrationError(
                f"unknown classifier {name!r}; registered: {sorted(self.classifiers)}") from None

    def classifier_names(self) -> list[str]:
        return list(self.classifiers)

    def unregister(self, name: str):
        self.backends.pop(name, None)
        self.classifiers.pop(name, None)


registry = Registry()


def adapter_register(name: str, descriptor, reg: Registry | None = None):
    """Register a backend or classifier under ``name`` and return it."""
    return (reg or registry).register(name, descriptor)


def require_differentiable(*models):
    for m in models:
        if not m.capabilities.differentiable:
            raise CapabilityError(f"{type(m).__name__} is not differentiable")

"""Adversarial latent optimization over the terminal DDIM latent."""
from __future__ import annotations

import hashlib
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .boundary import boundary_process
from .config import AttackConfig
from .diffusion import denoise_full, save_array
from .errors import ParameterError
from .inversion import InversionRecord, reconstruct
from .models.base import Backend, Classifier, require_differentiable

log = logging.getLogger(__name__)

__all__ = [
    "AttackResult", "StalledGradientWarning", "adversarial_loss", "attack_batch",
    "boundary_process", "momentum_update", "project_linf", "run_attack", "skip_gradient",
]


class StalledGradientWarning(RuntimeWarning):
    pass


@dataclass
class AttackResult:
    adversarial: torch.Tensor | None
    delta: torch.Tensor | None
    label: int
    loss_trace: list[float] = field(default_factory=list)
    delta_linf_trace: list[float] = field(default_factory=list)
    surrogate_prediction: int = -1
    surrogate_success: bool = False
    target_success: dict[str, bool] = field(default_factory=dict)
    duration: float = 0.0
    error: str | None = None

    def delta_checksum(self) -> str:
        if self.delta is None:
            return ""
        return hashlib.sha256(self.delta.detach().numpy().astype("<f4").tobytes()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "loss_trace": self.loss_trace,
            "delta_linf_trace": self.delta_linf_trace,
            "surrogate_prediction": self.surrogate_prediction,
            "surrogate_success": self.surrogate_success,
            "target_success": self.target_success,
            "delta_sha256": self.delta_checksum(),
            "error": self.error,
        }


def _labels(y, n):
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    return y.expand(n) if y.numel() == 1 else y


def adversarial_loss(x_adv, x_ref, y, classifier: Classifier, beta: float, mse_sign: float = -1.0):
    """Cross-entropy on ``x_adv`` plus ``mse_sign * beta`` times its MSE to ``x_ref``."""
    if x_adv.shape != x_ref.shape:
        raise ParameterError(f"x_adv {tuple(x_adv.shape)} and x_ref {tuple(x_ref.shape)} differ")
    logits = classifier.logits(x_adv)
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
    y = _labels(y, logits.shape[0])
    if torch.any(y < 0) or torch.any(y >= classifier.num_classes):
        raise ParameterError(f"label out of range [0, {classifier.num_classes})")
    ce = F.cross_entropy(logits, y)
    if beta == 0:
        return ce
    return ce + mse_sign * beta * F.mse_loss(x_adv, x_ref)


def rho_for(record: InversionRecord, config: AttackConfig) -> float:
    return 1.0 if config.rho_mode == "unit" else record.schedule.rho


def skip_gradient(record: InversionRecord, delta: torch.Tensor, classifier: Classifier, y,
                  config: AttackConfig, backend: Backend, x_ref: torch.Tensor | None = None,
                  rho: float | None = None):
    """Latent gradient approximated as ``rho * dL/dz0``; returns ``(grad, loss)``.

    The denoising chain runs without autograd; only the decoder, boundary
    processing, loss and classifier are differentiated.
    """
    require_differentiable(classifier)
    if x_ref is None:
        x_ref = reconstruct(record, backend)
    with torch.no_grad():
        z0 = denoise_full(backend.noise_predictor, record.schedule, record.z_T + delta,
                          record.text_embedding, record.nulls, record.guidance_w)
    z0.requires_grad_(True)
    x = boundary_process(backend.decode(z0))
    loss = adversarial_loss(x, x_ref, y, classifier, config.beta, config.mse_sign)
    (g0,) = torch.autograd.grad(loss, z0)
    rho = rho_for(record, config) if rho is None else rho
    return rho * g0, loss.item()


def momentum_update(g_prev: torch.Tensor, grad: torch.Tensor, mu: float) -> torch.Tensor:
    """``mu * g_prev + grad / ||grad||_1``; a zero gradient leaves only the decayed momentum."""
    if g_prev.shape != grad.shape:
        raise ParameterError(f"momentum {tuple(g_prev.shape)} and gradient {tuple(grad.shape)} differ")
    norm = grad.abs().sum()
    if norm == 0:
        warnings.warn("gradient is exactly zero; momentum not refreshed", StalledGradientWarning,
                      stacklevel=2)
        return mu * g_prev
    return mu * g_prev + grad / norm


def _dtype_floor(value: float, dtype: torch.dtype) -> float:
    """Largest number representable in ``dtype`` that does not exceed ``value``."""
    v = torch.tensor(value, dtype=dtype)
    if v.item() > value:
        v = torch.nextafter(v, torch.tensor(0.0, dtype=dtype))
    return v.item()


def project_linf(delta: torch.Tensor, kappa: float) -> torch.Tensor:
    """Clamp elementwise into [-kappa, kappa] (rounded inward to the tensor's dtype)."""
    bound = _dtype_floor(kappa, delta.dtype)
    return torch.clamp(delta, -bound, bound)


def run_attack(record: InversionRecord, classifier: Classifier, y: int, config: AttackConfig,
               backend: Backend, targets: dict[str, Classifier] | None = None) -> AttackResult:
    """Momentum sign ascent on a perturbation of ``z_T`` inside the kappa ball."""
    require_differentiable(backend, classifier)
    start = time.perf_counter()
    x_ref = reconstruct(record, backend)
    delta = torch.zeros_like(record.z_T)
    g = torch.zeros_like(record.z_T)
    rho = rho_for(record, config)
    losses, linf = [], []
    for _ in range(config.N_a):
        grad, loss = skip_gradient(record, delta, classifier, y, config, backend, x_ref, rho)
        g = momentum_update(g, grad, config.mu)
        delta = project_linf(delta + config.eta * torch.sign(g), config.kappa)
        size = delta.abs().max().item()
        assert size <= config.kappa, f"budget violated: {size} > {config.kappa}"
        losses.append(loss)
        linf.append(size)
    x_adv = reconstruct(record, backend, delta)
    pred = int(classifier.predict(x_adv).reshape(-1)[0])
    target_success = {name: bool(int(clf.predict(x_adv).reshape(-1)[0]) != y)
                      for name, clf in (targets or {}).items()}
    return AttackResult(x_adv, delta, int(y), losses, linf, pred, pred != y, target_success,
                        time.perf_counter() - start)


def attack_batch(records, labels, surrogate: Classifier, targets: dict[str, Classifier],
                 config: AttackConfig, backend: Backend) -> list[AttackResult]:
    """Attack each record independently; failures are captured per image."""
    results = []
    for record, y in zip(records, labels, strict=True):
        try:
            results.append(run_attack(record, surrogate, int(y), config, backend, targets))
        except Exception as exc:
            log.warning("attack failed for %r: %s", record.prompt, exc)
            results.append(AttackResult(None, None, int(y), error=f"{type(exc).__name__}: {exc}"))
    return results


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """``(C, H, W)`` or ``(1, C, H, W)`` in [0, 1] to an ``(H, W, C)`` uint8 array."""
    arr = image.detach().reshape(image.shape[-3:]).numpy()
    return np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def save_result(result: AttackResult, directory, image_id: str) -> None:
    """Write ``results/<id>.json``, ``adv/<id>.png`` and the raw delta next to the record."""
    from PIL import Image

    d = Path(directory)
    (d / "results").mkdir(parents=True, exist_ok=True)
    (d / "results" / f"{image_id}.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    if result.adversarial is not None:
        (d / "adv").mkdir(exist_ok=True)
        Image.fromarray(to_uint8(result.adversarial)).save(d / "adv" / f"{image_id}.png")
        rec_dir = d / "records" / image_id
        rec_dir.mkdir(parents=True, exist_ok=True)
        save_array(rec_dir / "delta.f32", result.delta)
        (rec_dir / "loss_trace.json").write_text(json.dumps(result.loss_trace))

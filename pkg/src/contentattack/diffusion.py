"""DDIM schedule, steppers and classifier-free guidance.

Latent index convention used everywhere in the package: ``i = 0`` is the
clean sample (alpha = 1) and ``i = 1..T`` are the inference timesteps, where
index ``i`` maps to the training timestep ``schedule.inference_steps[i - 1]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import InterfaceError, ParameterError


@dataclass(frozen=True)
class DiffusionSchedule:
    total_train_steps: int
    beta_start: float
    beta_end: float
    T: int
    betas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    inference_steps: np.ndarray = field(repr=False)

    def alpha(self, i: int) -> float:
        """Cumulative alpha at latent index ``i`` (1.0 for the clean slot)."""
        if not 0 <= i <= self.T:
            raise ParameterError(f"latent index {i} outside [0, {self.T}]")
        if i == 0:
            return 1.0
        return float(self.alpha_bars[self.inference_steps[i - 1]])

    def model_timestep(self, i: int) -> int:
        """Training timestep fed to the noise predictor at latent index ``i``."""
        if not 0 <= i <= self.T:
            raise ParameterError(f"latent index {i} outside [0, {self.T}]")
        return 0 if i == 0 else int(self.inference_steps[i - 1])

    @property
    def rho(self) -> float:
        """1/sqrt(alpha_bar) at the last training step."""
        return float(1.0 / math.sqrt(self.alpha_bars[-1]))

    def to_dict(self) -> dict:
        return {
            "total_train_steps": self.total_train_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "T": self.T,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        return compute_schedule(int(d["total_train_steps"]), float(d["beta_start"]),
                                float(d["beta_end"]), int(d["T"]))

    @classmethod
    def from_json(cls, text: str) -> "DiffusionSchedule":
        return cls.from_dict(json.loads(text))


def _even_steps(total: int, T: int) -> np.ndarray:
    if T == 0:
        return np.zeros(0, dtype=np.int64)
    # trailing spacing: the last inference step is the last training step
    steps = np.round(np.arange(1, T + 1) * (total / T)).astype(np.int64) - 1
    return steps


def compute_schedule(total_train_steps: int = 1000, beta_start: float = 0.00085,
                     beta_end: float = 0.012, T: int = 50) -> DiffusionSchedule:
    """Scaled-linear beta schedule with ``T`` evenly spaced inference steps."""
    if total_train_steps < 1:
        raise ParameterError("total_train_steps must be positive")
    if not 0 < beta_start <= beta_end < 1:
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not 0 <= T <= total_train_steps:
        raise ParameterError(f"T={T} must lie in [0, {total_train_steps}]")
    betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, total_train_steps, dtype=np.float64) ** 2
    alpha_bars = np.cumprod(1.0 - betas)
    return DiffusionSchedule(total_train_steps, beta_start, beta_end, T, betas, alpha_bars,
                             _even_steps(total_train_steps, T))


def schedule_from_betas(betas: Sequence[float], T: int | None = None) -> DiffusionSchedule:
    """Build a schedule from explicit betas (used for hand-checked cases)."""
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or len(betas) == 0 or np.any(betas <= 0) or np.any(betas >= 1):
        raise ParameterError("betas must be a non-empty 1-D sequence in (0, 1)")
    n = len(betas)
    T = n if T is None else T
    if not 0 <= T <= n:
        raise ParameterError(f"T={T} must lie in [0, {n}]")
    return DiffusionSchedule(n, float(betas[0]), float(betas[-1]), T, betas,
                             np.cumprod(1.0 - betas), _even_steps(n, T))


def _check_embedding(model, e: torch.Tensor):
    if tuple(e.shape[-len(model.embedding_shape):]) != tuple(model.embedding_shape):
        raise InterfaceError(f"embedding shape {tuple(e.shape)} does not match "
                             f"declared {tuple(model.embedding_shape)}")


def _check_latent(model, z: torch.Tensor):
    if tuple(z.shape[1:]) != tuple(model.latent_shape):
        raise InterfaceError(f"latent shape {tuple(z.shape)} does not match "
                             f"declared (B, *{tuple(model.latent_shape)})")


def cfg_predict(model, z: torch.Tensor, t: int, cond: torch.Tensor, null: torch.Tensor,
                w: float) -> torch.Tensor:
    """Guided noise prediction ``w * eps(cond) + (1 - w) * eps(null)``."""
    _check_latent(model, z)
    _check_embedding(model, cond)
    _check_embedding(model, null)
    # the dropped branch is skipped, so w in {0, 1} is exact and cheaper
    if w == 1:
        return model.predict(z, t, cond)
    if w == 0:
        return model.predict(z, t, null)
    return w * model.predict(z, t, cond) + (1 - w) * model.predict(z, t, null)


def ddim_transition(z, eps, alpha_from: float, alpha_to: float):
    """Deterministic DDIM move between two cumulative alphas.

    Written on the scaled latent ``z / sqrt(alpha)``, which moves linearly in
    ``sqrt(1/alpha - 1)``; multiplying back by ``sqrt(alpha_to)`` gives the
    noise coefficient below. Moving there and back with the same ``eps`` is
    the identity.
    """
    scale = math.sqrt(alpha_to / alpha_from)
    coef = math.sqrt(alpha_to) * (math.sqrt(1.0 / alpha_to - 1.0) - math.sqrt(1.0 / alpha_from - 1.0))
    return scale * z + coef * eps


def ddim_invert_step(model, schedule: DiffusionSchedule, z: torch.Tensor, i: int,
                     cond: torch.Tensor) -> torch.Tensor:
    """Map the latent at index ``i`` to index ``i + 1`` (unguided)."""
    if not 0 <= i < schedule.T:
        raise ParameterError(f"cannot invert from index {i} with T={schedule.T}")
    _check_latent(model, z)
    _check_embedding(model, cond)
    # noise is queried at the destination timestep so that invert/denoise pairs
    # evaluate the predictor at the same t
    eps = model.predict(z, schedule.model_timestep(i + 1), cond)
    return ddim_transition(z, eps, schedule.alpha(i), schedule.alpha(i + 1))


def ddim_denoise_step(model, schedule: DiffusionSchedule, z: torch.Tensor, i: int,
                      cond: torch.Tensor, null: torch.Tensor, w: float) -> torch.Tensor:
    """Map the latent at index ``i`` to ``i - 1`` using guided noise."""
    if not 1 <= i <= schedule.T:
        raise ParameterError(f"cannot denoise from index {i} with T={schedule.T}")
    eps = cfg_predict(model, z, schedule.model_timestep(i), cond, null, w)
    return ddim_transition(z, eps, schedule.alpha(i), schedule.alpha(i - 1))


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor,
                    schedule: DiffusionSchedule) -> torch.Tensor:
    """Closed-form noising at training timestep(s) ``t``."""
    if z0.shape != eps.shape:
        raise InterfaceError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    a = torch.as_tensor(schedule.alpha_bars, dtype=z0.dtype)[torch.as_tensor(t)]
    if a.ndim:
        a = a.reshape(-1, *([1] * (z0.ndim - 1)))
    return a.sqrt() * z0 + (1 - a).sqrt() * eps


def denoise_full(model, schedule: DiffusionSchedule, z_T: torch.Tensor, cond: torch.Tensor,
                 nulls: Sequence[torch.Tensor], w: float) -> torch.Tensor:
    """Run guided DDIM from index T down to 0; ``nulls[i - 1]`` is used at index i.

    Autograd is left on so callers can differentiate through the whole chain.
    """
    if len(nulls) != schedule.T:
        raise ParameterError(f"expected {schedule.T} null embeddings, got {len(nulls)}")
    z = z_T
    for i in range(schedule.T, 0, -1):
        z = ddim_denoise_step(model, schedule, z, i, cond, nulls[i - 1], w)
    return z


def save_array(path, values, **meta) -> None:
    """Write ``values`` as raw little-endian float32 plus a ``.json`` sidecar."""
    path = Path(path)
    arr = np.ascontiguousarray(np.asarray(values, dtype="<f4"))
    path.write_bytes(arr.tobytes())
    sidecar = {"shape": list(arr.shape), "dtype": "float32-le", **meta}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, sort_keys=True))


def load_array(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    arr = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["shape"])
    return arr.astype(np.float32), meta


def save_latent(path, z, timestep: int) -> None:
    if isinstance(z, torch.Tensor):
        z = z.detach().cpu().numpy()
    save_array(path, z, timestep=int(timestep))


def load_latent(path) -> tuple[torch.Tensor, int]:
    arr, meta = load_array(path)
    return torch.from_numpy(arr), int(meta["timestep"])

"""Image latent mapping: DDIM inversion pivots plus per-timestep null-embedding tuning."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .boundary import boundary_process
from .config import AttackConfig
from .diffusion import (DiffusionSchedule, compute_schedule, ddim_invert_step, ddim_transition,
                        denoise_full, load_array, save_array)
from .errors import ParameterError
from .models.base import Backend, require_differentiable


@dataclass
class InversionRecord:
    z_T: torch.Tensor
    pivots: list[torch.Tensor]
    nulls: list[torch.Tensor]
    text_embedding: torch.Tensor
    guidance_w: float
    per_step_losses: list[float]
    schedule: DiffusionSchedule
    source: torch.Tensor
    prompt: str = ""
    initial_losses: list[float] = field(default_factory=list)
    reconstruction_error: float = float("nan")
    n_inner: int = 0
    zeta: float = 0.0

    @property
    def T(self) -> int:
        return self.schedule.T

    @property
    def psnr(self) -> float:
        return psnr_from_mse(self.reconstruction_error)


def psnr_from_mse(mse: float) -> float:
    return float("inf") if mse <= 0 else float(10 * np.log10(1.0 / mse))


def pivot_trajectory(z0: torch.Tensor, cond: torch.Tensor, model,
                     schedule: DiffusionSchedule) -> list[torch.Tensor]:
    """Unguided DDIM inversion; element ``i`` is the latent at index ``i``."""
    if not torch.isfinite(z0).all():
        raise ParameterError("z0 contains non-finite values")
    pivots = [z0]
    with torch.no_grad():
        for i in range(schedule.T):
            pivots.append(ddim_invert_step(model, schedule, pivots[-1], i, cond))
    return pivots


def optimize_null_embeddings(pivots, cond, model, schedule: DiffusionSchedule, n_inner: int,
                             zeta: float, w: float, null_init: torch.Tensor):
    """Tune one null embedding per timestep so guided denoising tracks the pivots.

    Plain gradient descent with step ``zeta`` for exactly ``n_inner`` iterations per
    timestep on the mean squared deviation from the next pivot; each timestep
    starts from the previous one's result.

    Returns ``(nulls, running, final_losses, initial_losses)`` where ``nulls[i - 1]``
    and the loss lists at position ``i - 1`` belong to index ``i``, and
    ``running[i]`` is the guided latent at index ``i``.
    """
    if len(pivots) != schedule.T + 1:
        raise ParameterError(f"expected {schedule.T + 1} pivots, got {len(pivots)}")
    if n_inner > 0:
        require_differentiable(model)
    T = schedule.T
    nulls: list = [None] * T
    final, initial = [0.0] * T, [0.0] * T
    running: list = [None] * (T + 1)
    running[T] = z = pivots[T]
    null = null_init.detach().clone()
    for i in range(T, 0, -1):
        t = schedule.model_timestep(i)
        a_from, a_to = schedule.alpha(i), schedule.alpha(i - 1)
        target = pivots[i - 1]
        with torch.no_grad():
            eps_c = model.predict(z, t, cond)

        def step(e):
            eps = eps_c if w == 1 else w * eps_c + (1 - w) * model.predict(z, t, e)
            z_prev = ddim_transition(z, eps, a_from, a_to)
            return z_prev, F.mse_loss(z_prev, target)

        for j in range(n_inner):
            e = null.requires_grad_(True)
            _, loss = step(e)
            if j == 0:
                initial[i - 1] = loss.item()
            if loss.requires_grad:
                (grad,) = torch.autograd.grad(loss, e)
            else:
                grad = torch.zeros_like(e)
            null = (e - zeta * grad).detach()
        with torch.no_grad():
            z, loss = step(null)
        final[i - 1] = loss.item()
        if n_inner == 0:
            initial[i - 1] = final[i - 1]
        nulls[i - 1] = null.clone()
        running[i - 1] = z
    return nulls, running, final, initial


def map_image(image: torch.Tensor, prompt: str, backend: Backend,
              config: AttackConfig = AttackConfig()) -> InversionRecord:
    """Map an image in [0, 1] of shape ``(C, H, W)`` or ``(1, C, H, W)`` to an inversion record."""
    x = image if image.ndim == 4 else image.unsqueeze(0)
    x = x.detach().float()
    if x.min() < 0 or x.max() > 1:
        raise ParameterError("image values must lie in [0, 1]")
    schedule = compute_schedule(T=config.T)
    model = backend.noise_predictor
    cond = backend.embed(prompt)
    with torch.no_grad():
        z0 = backend.encode(x)
    pivots = pivot_trajectory(z0, cond, model, schedule)
    nulls, _, final, initial = optimize_null_embeddings(
        pivots, cond, model, schedule, config.N_i, config.zeta, config.w, backend.null_embedding())
    record = InversionRecord(pivots[-1], pivots, nulls, cond, config.w, final, schedule, x,
                             prompt, initial, n_inner=config.N_i, zeta=config.zeta)
    recon = reconstruct(record, backend)
    record.reconstruction_error = F.mse_loss(recon, x).item()
    return record


def reconstruct(record: InversionRecord, backend: Backend, delta: torch.Tensor | None = None) -> torch.Tensor:
    """Guided denoising from ``z_T (+ delta)`` with the stored nulls, mapped into [0, 1]."""
    z = record.z_T if delta is None else record.z_T + delta
    with torch.no_grad():
        z0 = denoise_full(backend.noise_predictor, record.schedule, z, record.text_embedding,
                          record.nulls, record.guidance_w)
        return boundary_process(backend.decode(z0))


def save_record(record: InversionRecord, directory) -> Path:
    """Persist a record as raw float32 arrays plus ``meta.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_array(d / "z_T.f32", record.z_T, timestep=record.T)
    save_array(d / "pivots.f32", torch.cat(record.pivots).numpy())
    nulls = torch.stack(record.nulls).numpy() if record.nulls else np.zeros((0, *record.text_embedding.shape))
    save_array(d / "nulls.f32", nulls)
    save_array(d / "text_embedding.f32", record.text_embedding)
    save_array(d / "source.f32", record.source)
    meta = {
        "prompt": record.prompt,
        "w": record.guidance_w,
        "T": record.T,
        "N_i": record.n_inner,
        "zeta": record.zeta,
        "schedule": record.schedule.to_dict(),
        "per_step_losses": record.per_step_losses,
        "initial_losses": record.initial_losses,
        "reconstruction_error": record.reconstruction_error,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


def load_record(directory) -> InversionRecord:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    schedule = DiffusionSchedule.from_dict(meta["schedule"])
    pivots = torch.from_numpy(load_array(d / "pivots.f32")[0])
    nulls = torch.from_numpy(load_array(d / "nulls.f32")[0])
    return InversionRecord(
        z_T=torch.from_numpy(load_array(d / "z_T.f32")[0]),
        pivots=[p[None] for p in pivots],
        nulls=[n for n in nulls],
        text_embedding=torch.from_numpy(load_array(d / "text_embedding.f32")[0]),
        guidance_w=meta["w"],
        per_step_losses=meta["per_step_losses"],
        schedule=schedule,
        source=torch.from_numpy(load_array(d / "source.f32")[0]),
        prompt=meta["prompt"],
        initial_losses=meta["initial_losses"],
        reconstruction_error=meta["reconstruction_error"],
        n_inner=meta["N_i"],
        zeta=meta["zeta"],
    )

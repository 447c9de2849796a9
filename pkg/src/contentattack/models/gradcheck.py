"""Central-difference check of classifier input gradients."""
from __future__ import annotations

import torch
import torch.nn.functional as F


def check_input_gradient(classifier, x: torch.Tensor, y: int, step: float = 1e-4,
                         n_probes: int = 8, seed: int = 0) -> float:
    """Worst relative error between analytic and finite-difference directional derivatives.

    Probes random unit directions in float64 so the step of ``1e-4`` is far above
    rounding noise.
    """
    module = classifier.module.double()
    try:
        x = x.double().reshape(1, *classifier.input_shape)
        grad = classifier.input_gradient(x, y).reshape(-1)
        gen = torch.Generator().manual_seed(seed)
        target = torch.tensor([y])
        worst = 0.0
        with torch.no_grad():
            for _ in range(n_probes):
                d = torch.randn(x.numel(), generator=gen, dtype=torch.float64)
                d /= d.norm()
                dx = d.reshape(x.shape)
                fp = F.cross_entropy(module(x + step * dx), target, reduction="sum")
                fm = F.cross_entropy(module(x - step * dx), target, reduction="sum")
                fd = (fp - fm).item() / (2 * step)
                an = torch.dot(grad, d).item()
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
        return worst
    finally:
        module.float()

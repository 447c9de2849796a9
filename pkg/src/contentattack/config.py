"""Attack hyperparameters."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .errors import ParameterError

RHO_MODES = ("unit", "schedule")
MSE_SIGNS = (-1.0, 1.0)


@dataclass(frozen=True)
class AttackConfig:
    T: int = 50
    N_i: int = 10
    N_a: int = 10
    beta: float = 0.1
    zeta: float = 0.01
    eta: float = 0.04
    kappa: float = 0.1
    mu: float = 1.0
    w: float = 7.5
    seed: int = 0
    rho_mode: str = "unit"
    # -1 penalizes drift from the reconstruction, +1 rewards it
    mse_sign: float = -1.0

    def __post_init__(self):
        if self.T < 0 or self.N_i < 0 or self.N_a < 0:
            raise ParameterError("T, N_i and N_a must be non-negative")
        if self.eta <= 0 or self.kappa <= 0:
            raise ParameterError("eta and kappa must be positive")
        if self.mu < 0:
            raise ParameterError("mu must be non-negative")
        if self.rho_mode not in RHO_MODES:
            raise ParameterError(f"rho_mode must be one of {RHO_MODES}")
        if self.mse_sign not in MSE_SIGNS:
            raise ParameterError("mse_sign must be +1 or -1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        names = {f.name: f.type for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

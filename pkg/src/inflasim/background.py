"""de Sitter background: scale factor, e-folds and slow-roll bookkeeping.

Units are Planck units (M_pl = 1, hbar = 1). Conformal time runs over
negative values and never reaches zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

from .errors import DomainError

DEFAULT_H = 0.05
DEFAULT_EPSILON = 0.01
DEFAULT_CS = 1.0


@dataclass(frozen=True)
class CosmologyParams:
    """Background parameters of the curvature-perturbation theory.

    ``Sigma`` defaults to H^2 eps / c_s^2 (the single-field relation) when
    left as ``None``; pass a number to explore detuned couplings.
    """

    H: float = DEFAULT_H
    epsilon: float = DEFAULT_EPSILON
    c_s: float = DEFAULT_CS
    lambda_c: float = 0.0
    tau0: float = -10.0
    tau_end: float = -1.0
    Sigma: float | None = None
    Sigma_derived: bool = field(init=False, default=True)

    def __post_init__(self):
        if not self.H > 0:
            raise DomainError(f"H must be positive, got {self.H}")
        if not self.epsilon > 0:
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.c_s <= 1:
            raise DomainError(f"c_s must lie in (0, 1], got {self.c_s}")
        if not self.tau0 < 0 or not self.tau_end < 0:
            raise DomainError("conformal times must be strictly negative")
        if not self.tau0 <= self.tau_end:
            raise DomainError(f"need tau0 <= tau_end, got {self.tau0} > {self.tau_end}")
        if self.Sigma is None:
            object.__setattr__(self, "Sigma", self.H**2 * self.epsilon / self.c_s**2)
        else:
            object.__setattr__(self, "Sigma_derived", False)

    @property
    def a0(self) -> float:
        return -1.0 / (self.H * self.tau0)

    @property
    def H_dot(self) -> float:
        """Cosmic-time derivative of H from eps = -Hdot/H^2."""
        return -self.epsilon * self.H**2

    def replace(self, **changes) -> "CosmologyParams":
        d = self.to_dict()
        if "Sigma" not in changes and d.get("Sigma_derived", True):
            d["Sigma"] = None
        d.pop("Sigma_derived", None)
        d.update(changes)
        return CosmologyParams(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def scale_factor(params: CosmologyParams, tau: float) -> float:
    """a(tau) = -1/(H tau)."""
    if not tau < 0:
        raise DomainError(f"scale factor needs tau < 0, got {tau}")
    return -1.0 / (params.H * tau)


def efolds(params: CosmologyParams) -> float:
    """N = log(a(tau_end)/a(tau0)) = log(tau0/tau_end)."""
    return math.log(params.tau0 / params.tau_end)


def eft_hierarchy_ok(params: CosmologyParams, b: float, ll_factor: float = 0.1) -> bool:
    """Check H < sqrt(H eps) <= 1/b << 1.

    ``ll_factor`` makes the last inequality concrete: 1/b must not exceed it.
    """
    cutoff = 1.0 / b
    return params.H < math.sqrt(params.H * params.epsilon) <= cutoff <= ll_factor

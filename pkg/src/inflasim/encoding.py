"""Field-basis truncation, qubit budgets and light-cone reconstruction kernels."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc, erfcinv

from .background import CosmologyParams, efolds
from .errors import DomainError
from .lattice_modes import LatticeSpec, lattice_omegas, modes, momentum_mass

DEFAULT_EPS_JLP = 1e-3
DEFAULT_PAD = 2


@dataclass(frozen=True)
class FieldGridSpec:
    """Per-site field grid of G = 2**n_b points spanning [-zeta_max, zeta_max].

    Grid points sit at cell centres, zeta_j = (j - (G-1)/2) * delta_zeta, so the
    window edge is exactly zeta_max. ``cell`` is the site volume b**d, which
    fixes the conjugate momentum spacing.
    """

    zeta_max: float
    n_b: int
    cell: float = 1.0
    eps_jlp: float = DEFAULT_EPS_JLP

    def __post_init__(self):
        if not self.zeta_max > 0:
            raise DomainError(f"zeta_max must be positive, got {self.zeta_max}")
        if int(self.n_b) != self.n_b or self.n_b < 1:
            raise DomainError(f"n_b must be a positive integer, got {self.n_b}")
        if not 0 < self.eps_jlp < 1:
            raise DomainError(f"eps_jlp must lie in (0, 1), got {self.eps_jlp}")
        object.__setattr__(self, "n_b", int(self.n_b))

    @property
    def G(self) -> int:
        return 2**self.n_b

    @property
    def delta_zeta(self) -> float:
        return 2.0 * self.zeta_max / self.G

    @property
    def delta_pi(self) -> float:
        return 2.0 * np.pi / (self.G * self.delta_zeta * self.cell)

    @property
    def values(self) -> np.ndarray:
        return (np.arange(self.G) - (self.G - 1) / 2.0) * self.delta_zeta

    @property
    def pi_values(self) -> np.ndarray:
        """Centred momentum eigenvalues, symmetric about zero."""
        return (np.arange(self.G) - (self.G - 1) / 2.0) * self.delta_pi

    @property
    def pi_max(self) -> float:
        return (self.G - 1) / 2.0 * self.delta_pi

    @classmethod
    def for_variance(cls, var: float, volume: int, n_b: int, cell: float = 1.0,
                     eps_jlp: float = DEFAULT_EPS_JLP, budget_fraction: float = 1.0):
        """Tightest window whose Gaussian tail mass (union bound) is within budget."""
        z = math.sqrt(2.0) * float(erfcinv(budget_fraction * eps_jlp / volume))
        return cls(zeta_max=z * math.sqrt(var), n_b=n_b, cell=cell, eps_jlp=eps_jlp)


def jlp_field_bound(var_zeta: float, volume: float, eps_jlp: float) -> float:
    """Chebyshev window sqrt(V/eps) * sqrt(<zeta^2>)."""
    if var_zeta < 0 or volume <= 0 or eps_jlp <= 0:
        raise DomainError("jlp_field_bound needs var >= 0, V > 0, eps > 0")
    return math.sqrt(volume / eps_jlp) * math.sqrt(var_zeta)


def gaussian_leakage(variances, edge: float) -> float:
    """Union bound on the probability that any Gaussian site leaves [-edge, edge]."""
    variances = np.atleast_1d(np.asarray(variances, dtype=float))
    return float(np.sum(erfc(edge / np.sqrt(2.0 * variances))))


def variance_bounds(params: CosmologyParams, spec: LatticeSpec):
    """Closed-form (<pi^2> bound, <zeta^2> estimate).

    The momentum bound uses b**(d+1) in place of b**4 for d < 3.
    """
    a0 = params.a0
    var_pi = a0 * a0 * params.epsilon / (spec.b ** (spec.d + 1) * params.c_s**2)
    var_zeta = params.H**2 * (params.c_s**2 * params.tau0**2 / spec.b**2 + 2.0 * math.log(spec.L_hat)) / (
        16.0 * math.pi**2 * params.c_s * params.epsilon)
    return var_pi, var_zeta


def qubit_budget(zeta_max: float, delta_zeta: float) -> int:
    """ceil(log2(zeta_max / delta_zeta))."""
    if zeta_max <= 0 or delta_zeta <= 0:
        raise DomainError("qubit_budget needs positive inputs")
    return max(1, math.ceil(math.log2(zeta_max / delta_zeta) - 1e-12))


def budget_grid(params: CosmologyParams, spec: LatticeSpec, eps_jlp: float = DEFAULT_EPS_JLP) -> dict:
    """Encoding budget from the closed-form variance bounds."""
    var_pi, var_zeta = variance_bounds(params, spec)
    V = spec.volume
    zeta_max = jlp_field_bound(var_zeta, V, eps_jlp)
    delta_zeta = math.sqrt(eps_jlp / V) / (spec.b**spec.d * math.sqrt(var_pi))
    n_b = qubit_budget(zeta_max, delta_zeta)
    return {
        "var_pi_bound": var_pi,
        "var_zeta_estimate": var_zeta,
        "zeta_max": zeta_max,
        "delta_zeta": delta_zeta,
        "n_b": n_b,
        "total_qubits": n_b * V,
        "eps_jlp": eps_jlp,
    }


# -- reconstruction kernels ---------------------------------------------------

@dataclass(frozen=True)
class KernelPair:
    target: tuple
    support: np.ndarray
    K_zeta: np.ndarray
    K_pi: np.ndarray
    residual: float

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        d = self.support.shape[1]
        w.writerow([f"y{i}" for i in range(d)] + ["K_zeta", "K_pi"])
        for y, kz, kp in zip(self.support, self.K_zeta, self.K_pi):
            w.writerow([int(v) for v in y] + [repr(float(kz)), repr(float(kp))])
        return out.getvalue()


def kernel_coefficients(params: CosmologyParams, omega, tau: float, tau0: float):
    """Per-mode weights with zeta_k(tau) = c_z zeta_k(tau0) + c_p pi_k(tau0).

    Both come from the commutator part of the mode functions, so they are
    real and independent of the vacuum.
    """
    u, _ = modes(params, omega, tau)
    u0, du0 = modes(params, omega, tau0)
    m0 = momentum_mass(params, tau0)
    c_z = 2.0 * m0 * np.imag(u * np.conj(du0))
    c_p = -2.0 * np.imag(u * np.conj(u0))
    return c_z, c_p


def periodic_distance(spec: LatticeSpec, x, ys) -> np.ndarray:
    """Minimum-image Euclidean distance in physical units."""
    diff = np.asarray(ys, dtype=float) - np.asarray(x, dtype=float)
    diff = (diff + spec.L_hat / 2.0) % spec.L_hat - spec.L_hat / 2.0
    return spec.b * np.sqrt(np.sum(diff * diff, axis=-1))


def hkll_kernel(params: CosmologyParams, spec: LatticeSpec, tau: float, x, truncate: bool = False,
                pad: float = DEFAULT_PAD, tau0: float | None = None) -> KernelPair:
    """Kernels expressing zeta(tau, x) through zeta and pi on the initial slice.

    The frozen k = 0 mode carries weight 1/V in K_zeta at all times, which makes
    K_zeta exactly the identity at tau = tau0.
    """
    tau0 = params.tau0 if tau0 is None else tau0
    if tau < tau0:
        raise DomainError(f"reconstruction needs tau >= tau0, got {tau} < {tau0}")
    x = np.asarray(x, dtype=int)
    V = spec.volume
    om = lattice_omegas(spec)[spec.nonzero]
    k = spec.momenta[spec.nonzero]
    c_z, c_p = kernel_coefficients(params, om, tau, tau0)
    ys = spec.coords
    phase = np.exp(1j * ((x[None, :] - ys) * spec.b) @ k.T)
    K_z = (1.0 + (phase @ c_z).real) / V
    K_p = (phase @ c_p).real / V
    if tau == tau0:
        K_z = (np.all(ys == x[None, :] % spec.L_hat, axis=1)).astype(float)
        K_p = np.zeros(V)
    residual = 0.0
    support = ys
    if truncate:
        keep = periodic_distance(spec, x, ys) < params.c_s * abs(tau - tau0) + pad * spec.b
        parts = []
        for K in (K_z, K_p):
            total = np.linalg.norm(K)
            parts.append(np.linalg.norm(K[~keep]) / total if total > 0 else 0.0)
        residual = float(max(parts))
        support, K_z, K_p = ys[keep], K_z[keep], K_p[keep]
    return KernelPair(tuple(int(v) for v in x), support, K_z, K_p, residual)


def kernel_matrices(params: CosmologyParams, spec: LatticeSpec, tau: float, tau0: float | None = None):
    """Untruncated kernels for every target site, as two V x V matrices."""
    rows = [hkll_kernel(params, spec, tau, c, tau0=tau0) for c in spec.coords]
    return np.array([r.K_zeta for r in rows]), np.array([r.K_pi for r in rows])


def encoding_complexity(params: CosmologyParams, spec: LatticeSpec) -> int:
    """Number of initial-slice sites inside the past light cone, (c_s|tau0|(1-e^-N)/b)^d rounded up."""
    N = efolds(params)
    r = params.c_s * abs(params.tau0) * (1.0 - math.exp(-N)) / spec.b
    return int(math.ceil(r**spec.d - 1e-9))

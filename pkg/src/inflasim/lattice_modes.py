"""Lattice geometry, dispersion, mode functions and the free two-point function.

The k = 0 mode is frozen: it never appears in mode sums and operations that
would be singular there raise :class:`ZeroModeError`. Time powers keep their
3+1 dimensional form for every d, while spatial measures use b**d.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .background import CosmologyParams, scale_factor
from .errors import DomainError, ZeroModeError

VACUA = ("bunch_davies", "instantaneous")


@dataclass(frozen=True)
class LatticeSpec:
    """Periodic hypercubic lattice with spacing ``b`` and ``L_hat`` sites per side."""

    b: float
    L_hat: int
    d: int = 3

    def __post_init__(self):
        if not self.b > 0:
            raise DomainError(f"lattice spacing must be positive, got {self.b}")
        if int(self.L_hat) != self.L_hat or self.L_hat < 2:
            raise DomainError(f"L_hat must be an integer >= 2, got {self.L_hat}")
        if self.d not in (1, 2, 3):
            raise DomainError(f"d must be 1, 2 or 3, got {self.d}")
        object.__setattr__(self, "L_hat", int(self.L_hat))

    @property
    def volume(self) -> int:
        return self.L_hat**self.d

    @property
    def length(self) -> float:
        return self.b * self.L_hat

    @cached_property
    def coords(self) -> np.ndarray:
        """Integer site coordinates, shape (V, d), row-major (last axis fastest)."""
        grids = np.meshgrid(*[np.arange(self.L_hat)] * self.d, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def site_index(self, n) -> int:
        n = np.mod(np.asarray(n, dtype=int), self.L_hat)
        return int(np.ravel_multi_index(tuple(n), (self.L_hat,) * self.d))

    def neighbour(self, site: int, axis: int, step: int = 1) -> int:
        n = self.coords[site].copy()
        n[axis] += step
        return self.site_index(n)

    @cached_property
    def momenta(self) -> np.ndarray:
        """All dual momenta folded into (-pi/b, pi/b]^d, same order as ``coords``."""
        n = self.coords.copy()
        n[n > self.L_hat // 2] -= self.L_hat
        return 2 * np.pi * n / self.length

    @cached_property
    def nonzero(self) -> np.ndarray:
        """Boolean mask of momenta other than k = 0."""
        return np.any(self.coords != 0, axis=1)


def _as_momentum(spec: LatticeSpec, k) -> np.ndarray:
    k = np.atleast_1d(np.asarray(k, dtype=float))
    if k.shape[-1] != spec.d:
        raise DomainError(f"momentum needs {spec.d} components, got shape {k.shape}")
    return k


def on_dual_lattice(spec: LatticeSpec, k, tol: float = 1e-9) -> bool:
    n = _as_momentum(spec, k) * spec.length / (2 * np.pi)
    return bool(np.all(np.abs(n - np.round(n)) < tol))


def dispersion(spec: LatticeSpec, k, check: bool = True):
    """omega(k) = (2/b) sqrt(sum_i sin^2(b k_i / 2)).

    ``k`` may be a single vector or an array of vectors along the leading axis.
    """
    k = _as_momentum(spec, k)
    if check and not on_dual_lattice(spec, k):
        raise DomainError("momentum is not on the dual lattice")
    s = np.sin(spec.b * k / 2.0)
    w = (2.0 / spec.b) * np.sqrt(np.sum(s * s, axis=-1))
    return float(w) if w.ndim == 0 else w


def dispersion_expansion(spec: LatticeSpec, k):
    """Leading small-b expansion k - b^2 sum k_i^4 / (24 k)."""
    k = _as_momentum(spec, k)
    kn = np.sqrt(np.sum(k * k, axis=-1))
    return kn - spec.b**2 * np.sum(k**4, axis=-1) / (24.0 * kn)


def lattice_omegas(spec: LatticeSpec) -> np.ndarray:
    """omega for every dual momentum (zero at k = 0)."""
    return dispersion(spec, spec.momenta, check=False)


# -- mode functions ---------------------------------------------------------

def _bd(params: CosmologyParams, omega, tau):
    omega = np.asarray(omega, dtype=float)
    if np.any(omega <= 0):
        raise ZeroModeError("mode functions need omega > 0 (k = 0 is frozen)")
    if not tau < 0:
        raise DomainError(f"mode functions need tau < 0, got {tau}")
    w = omega * params.c_s
    norm = params.H / (2.0 * np.sqrt(params.epsilon * params.c_s * omega**3))
    phase = np.exp(-1j * w * tau)
    v = norm * (1 + 1j * w * tau) * phase
    dv = norm * w * w * tau * phase
    return v, dv


def bunch_davies(params: CosmologyParams, omega, tau):
    """Bunch-Davies mode value v(omega, tau) for a given frequency."""
    return _bd(params, omega, tau)[0]


def bunch_davies_derivative(params: CosmologyParams, omega, tau):
    """d v / d tau."""
    return _bd(params, omega, tau)[1]


def mode_function(params: CosmologyParams, spec: LatticeSpec, k, tau):
    """Lattice Bunch-Davies mode v(k, tau), using omega(k) from the dispersion."""
    return bunch_davies(params, dispersion(spec, k), tau)


def continuum_mode_function(params: CosmologyParams, k, tau):
    """Continuum Bunch-Davies mode, omega -> |k|."""
    kn = np.sqrt(np.sum(np.atleast_1d(np.asarray(k, dtype=float)) ** 2, axis=-1))
    return bunch_davies(params, kn, tau)


def momentum_mass(params: CosmologyParams, tau: float) -> float:
    """m(tau) = 2 a^2 eps / c_s^2, so that pi = m zeta'."""
    a = scale_factor(params, tau)
    return 2.0 * a * a * params.epsilon / params.c_s**2


def vacuum_coefficients(params: CosmologyParams, omega, tau_vac: float, vacuum: str = "bunch_davies"):
    """Coefficients (c1, c2) with u = c1 v + c2 v* for the chosen vacuum.

    ``instantaneous`` is the ground state of the free Hamiltonian at
    ``tau_vac``: u real there with u' = -i c_s omega u.
    """
    omega = np.asarray(omega, dtype=float)
    if vacuum == "bunch_davies":
        return np.ones_like(omega, dtype=complex), np.zeros_like(omega, dtype=complex)
    if vacuum != "instantaneous":
        raise DomainError(f"unknown vacuum {vacuum!r}; choose from {VACUA}")
    a = scale_factor(params, tau_vac)
    u0 = np.sqrt(params.c_s / (4 * a * a * params.epsilon * omega)).astype(complex)
    du0 = -1j * params.c_s * omega * u0
    v0, dv0 = _bd(params, omega, tau_vac)
    det = v0 * np.conj(dv0) - np.conj(v0) * dv0
    c1 = (u0 * np.conj(dv0) - np.conj(v0) * du0) / det
    c2 = (v0 * du0 - u0 * dv0) / det
    return c1, c2


def modes(params: CosmologyParams, omega, tau, vacuum: str = "bunch_davies", tau_vac: float | None = None):
    """Mode value and derivative (u, u') for the chosen vacuum."""
    v, dv = _bd(params, omega, tau)
    if vacuum == "bunch_davies":
        return v, dv
    c1, c2 = vacuum_coefficients(params, omega, params.tau0 if tau_vac is None else tau_vac, vacuum)
    return c1 * v + c2 * np.conj(v), c1 * dv + c2 * np.conj(dv)


# -- Bogoliubov data ----------------------------------------------------------

def bogoliubov(params: CosmologyParams, k_norm: float, tau: float):
    """Return (alpha, beta, A, B) for the diagonalising rotation.

    alpha is real positive; beta = (sqrt(A^2 - |B|^2) - A)/B * alpha*.
    """
    if not k_norm > 0:
        raise ZeroModeError("Bogoliubov data is singular at k = 0")
    if not tau < 0:
        raise DomainError(f"need tau < 0, got {tau}")
    cs = params.c_s
    x = cs * tau * k_norm
    denom = 4.0 * cs * tau * tau * k_norm
    A = (1.0 + 2.0 * x * x) / denom
    B = (1.0 - 2j * x) * np.exp(2j * x) / denom
    # A^2 - |B|^2 = (c_s k / 2)^2 exactly; subtracting the two cancels badly outside the horizon
    root = 0.5 * cs * k_norm
    alpha = math.sqrt(0.5 * (1.0 + A / root))
    beta = (root - A) / B * alpha
    return complex(alpha), complex(beta), float(A), complex(B)


# -- two-point functions ------------------------------------------------------

def _phase_matrix(spec: LatticeSpec, sep: np.ndarray) -> np.ndarray:
    k = spec.momenta[spec.nonzero]
    return np.exp(1j * (np.atleast_2d(sep) * spec.b) @ k.T)


def mode_sum(spec: LatticeSpec, weights: np.ndarray, sep) -> np.ndarray:
    """(1/L^d) sum_{k != 0} w_k exp(i k . r) for integer separations ``sep``."""
    sep = np.atleast_2d(np.asarray(sep, dtype=float))
    return _phase_matrix(spec, sep) @ weights / spec.length**spec.d


def wightman(params, spec, tau1, tau2, x, y, vacuum="bunch_davies", tau_vac=None):
    """<zeta(tau1, x) zeta(tau2, y)> on the lattice, k = 0 excluded.

    ``x`` and ``y`` are integer site coordinates.
    """
    om = lattice_omegas(spec)[spec.nonzero]
    u1, _ = modes(params, om, tau1, vacuum, tau_vac)
    u2, _ = modes(params, om, tau2, vacuum, tau_vac)
    sep = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return complex(mode_sum(spec, u1 * np.conj(u2), sep)[0])


def wightman_matrix(params, spec, tau1, tau2, kind="zz", vacuum="bunch_davies", tau_vac=None):
    """V x V matrix of free correlators between all pairs of sites.

    ``kind`` picks the operator pair: ``zz`` <zeta zeta>, ``zp`` <zeta pi>,
    ``pz`` <pi zeta>, ``pp`` <pi pi>; the first operator sits at tau1.
    """
    om = lattice_omegas(spec)[spec.nonzero]
    u1, du1 = modes(params, om, tau1, vacuum, tau_vac)
    u2, du2 = modes(params, om, tau2, vacuum, tau_vac)
    f1 = u1 if kind[0] == "z" else momentum_mass(params, tau1) * du1
    f2 = u2 if kind[1] == "z" else momentum_mass(params, tau2) * du2
    w = f1 * np.conj(f2)
    c = spec.coords.astype(float)
    sep = (c[:, None, :] - c[None, :, :]).reshape(-1, spec.d)
    return mode_sum(spec, w, sep).reshape(spec.volume, spec.volume)


def free_gap(params: CosmologyParams, spec: LatticeSpec) -> float:
    """c_s * omega(k_min) with k_min = (2 pi / L, 0, ...)."""
    k = np.zeros(spec.d)
    k[0] = 2 * np.pi / spec.length
    return params.c_s * dispersion(spec, k)


# -- mode table ----------------------------------------------------------------

@dataclass(frozen=True)
class ModeTable:
    params: CosmologyParams
    spec: LatticeSpec

    @property
    def momenta(self) -> np.ndarray:
        return self.spec.momenta[self.spec.nonzero]

    @property
    def omega(self) -> np.ndarray:
        return lattice_omegas(self.spec)[self.spec.nonzero]

    @property
    def energy(self) -> np.ndarray:
        return self.params.c_s * self.omega

    def at(self, tau: float):
        """Mode values and Bogoliubov moduli at ``tau``."""
        v = bunch_davies(self.params, self.omega, tau)
        ab = [bogoliubov(self.params, w, tau) for w in self.omega]
        alpha = np.array([x[0] for x in ab])
        beta = np.array([x[1] for x in ab])
        return v, alpha, beta

    def to_csv(self, tau: float) -> str:
        v, alpha, beta = self.at(tau)
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow([f"k{i}" for i in range(self.spec.d)] + ["omega", "re_v", "im_v", "abs_alpha", "abs_beta"])
        for k, om, vv, al, be in zip(self.momenta, self.omega, v, alpha, beta):
            w.writerow([repr(float(x)) for x in k] + [repr(float(om)), repr(vv.real), repr(vv.imag),
                                                      repr(abs(al)), repr(abs(be))])
        return out.getvalue()

"""Time-dependent lattice Hamiltonian H1 + H2 + H3 as matrix-free actions.

H1 = sum_x b^d (kin pi^2 + s cub pi^3)      diagonal in the momentum basis
H2 = sum_x b^d a^2 eps (grad zeta)^2        diagonal in the field basis
H3 = s sum_x b^d h3 1/2 {pi, (grad zeta)^2} mixes the two

``pi`` here is the site momentum with its k = 0 part removed, so every term
commutes with uniform field shifts and the frozen sector is preserved.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.sparse.linalg import LinearOperator, expm_multiply

from .background import CosmologyParams, scale_factor
from .encoding import FieldGridSpec
from .errors import DomainError
from .hilbert import MAX_DENSE_DIM, check_dimension, make_basis

TERMS = ("H1", "H2", "H3")
DEFAULT_H3_SUBSTEPS = 4


@dataclass(frozen=True)
class Coefficients:
    """Per-site coefficients (already multiplied by the cell volume b^d)."""

    kinetic: float
    cubic: float
    gradient: float
    mixed: float

    def as_rows(self, tau):
        return [("H1_pi2", tau, self.kinetic), ("H1_pi3", tau, self.cubic),
                ("H2", tau, self.gradient), ("H3", tau, self.mixed)]


def coefficients(params: CosmologyParams, cell: float, tau: float, s: float = 1.0) -> Coefficients:
    a = scale_factor(params, tau)
    H, eps, cs = params.H, params.epsilon, params.c_s
    return Coefficients(
        kinetic=cell * cs**2 / (4 * a * a * eps),
        cubic=cell * s * cs**6 * params.lambda_c / (4 * a**5 * H**3 * eps**3),
        gradient=cell * a * a * eps,
        mixed=cell * s * cs**2 * (cs**2 - 1) * params.Sigma / (2 * a * H**3 * eps),
    )


def coefficient_table_csv(params: CosmologyParams, cell: float, taus, s: float = 1.0) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["label", "tau", "coefficient"])
    for tau in taus:
        for label, t, c in coefficients(params, cell, tau, s).as_rows(tau):
            w.writerow([label, repr(float(t)), repr(float(c))])
    return out.getvalue()


def _generator(dim: int, fn) -> LinearOperator:
    """Anti-Hermitian LinearOperator from a vector map (its adjoint is its negative).

    Blocks are applied column by column; expm_multiply's norm estimates need both.
    """
    def mm(m):
        return np.column_stack([fn(m[:, j]) for j in range(m.shape[1])])

    return LinearOperator((dim, dim), matvec=lambda v: fn(np.ravel(v)), matmat=mm,
                          rmatvec=lambda v: -fn(np.ravel(v)), rmatmat=lambda m: -mm(m), dtype=complex)


class HamiltonianFamily:
    """Operator pieces on a basis; coefficients are supplied per (tau, s)."""

    def __init__(self, params: CosmologyParams, basis):
        self.params = params
        self.basis = basis
        self.lattice = basis.lattice
        self.grid: FieldGridSpec = basis.grid

    @classmethod
    def build(cls, params, lattice, grid, frozen=True):
        return cls(params, make_basis(grid, lattice, frozen))

    def coefficients(self, tau, s=1.0) -> Coefficients:
        return coefficients(self.params, self.grid.cell, tau, s)

    @cached_property
    def pi_sq(self) -> np.ndarray:
        """sum_x (pi_x - mean pi)^2 written as (1/2V) sum_{x,y} (pi_x - pi_y)^2.

        Pairwise differences keep the Nyquist magnitude, so the term vanishes
        only when all momenta agree. Summing squares of the circular
        per-site means instead would leave evenly spread momentum patterns
        with no kinetic energy.
        """
        m = self.basis.momentum_indices
        G, V = self.grid.G, self.lattice.volume
        out = np.zeros(m.shape[0])
        for x in range(V):
            w = (m[:, [x]] - m + G // 2) % G - G // 2
            out += np.sum(w.astype(float) ** 2, axis=1)
        return out * self.grid.delta_pi**2 / (2 * V)

    @cached_property
    def pi_cube(self) -> np.ndarray:
        return np.sum(self.basis.relative_momenta**3, axis=0)

    @cached_property
    def grad_sq_sites(self) -> np.ndarray:
        """(grad zeta)^2 at each site, forward differences, shape (V, dim)."""
        lat, b = self.lattice, self.basis
        fields = np.array([b.field_values(x) for x in range(lat.volume)])
        out = np.zeros_like(fields)
        for x in range(lat.volume):
            for ax in range(lat.d):
                y = lat.neighbour(x, ax, 1)
                out[x] += ((fields[y] - fields[x]) / lat.b) ** 2
        return out

    @cached_property
    def grad_sq(self) -> np.ndarray:
        return self.grad_sq_sites.sum(axis=0)

    # -- actions -------------------------------------------------------------

    def h1_diag(self, c: Coefficients) -> np.ndarray:
        return c.kinetic * self.pi_sq + c.cubic * self.pi_cube

    def apply_h1(self, psi, c: Coefficients):
        return self.basis.momentum_apply(self.h1_diag(c), psi)

    def apply_h2(self, psi, c: Coefficients):
        return c.gradient * self.grad_sq * psi

    def _apply_h3_site(self, psi, x):
        b = self.basis
        p = b.relative_momenta[x]
        g = self.grad_sq_sites[x]
        return 0.5 * (b.momentum_apply(p, g * psi) + g * b.momentum_apply(p, psi))

    def apply_h3(self, psi, c: Coefficients):
        if c.mixed == 0.0:
            return np.zeros_like(psi)
        return c.mixed * sum(self._apply_h3_site(psi, x) for x in range(self.lattice.volume))

    def apply(self, psi, c: Coefficients, terms=TERMS):
        out = np.zeros_like(psi, dtype=complex)
        for t in terms:
            out = out + getattr(self, f"apply_{t.lower()}")(psi, c)
        return out

    def energy(self, psi, c: Coefficients, terms=TERMS) -> float:
        return float(np.vdot(psi, self.apply(psi, c, terms)).real)

    # -- exponentials ----------------------------------------------------------

    def exp_h1(self, psi, c: Coefficients, dt):
        return self.basis.momentum_apply(np.exp(-1j * dt * self.h1_diag(c)), psi)

    def exp_h2(self, psi, c: Coefficients, dt):
        return np.exp(-1j * dt * c.gradient * self.grad_sq) * psi

    def _exp_site(self, psi, x, scale):
        op = _generator(psi.size, lambda v: -1j * scale * self._apply_h3_site(v, x))
        return expm_multiply(op, psi, traceA=0.0)

    def exp_h3(self, psi, c: Coefficients, dt, substeps: int = DEFAULT_H3_SUBSTEPS):
        """exp(-i dt H3). substeps = 0 uses one Krylov exponential of the whole term,
        otherwise a symmetric split over site terms repeated ``substeps`` times."""
        if c.mixed == 0.0 or dt == 0.0:
            return psi
        if substeps == 0:
            op = _generator(psi.size, lambda v: -1j * dt * self.apply_h3(v, c))
            return expm_multiply(op, psi, traceA=0.0)
        h = dt * c.mixed / substeps
        sites = list(range(self.lattice.volume))
        for _ in range(substeps):
            for x in sites[:-1]:
                psi = self._exp_site(psi, x, h / 2)
            psi = self._exp_site(psi, sites[-1], h)
            for x in reversed(sites[:-1]):
                psi = self._exp_site(psi, x, h / 2)
        return psi

    # -- dense forms -------------------------------------------------------------

    @cached_property
    def _fourier_matrix(self) -> np.ndarray:
        dim = self.basis.dim
        check_dimension(dim, MAX_DENSE_DIM, "dense Hamiltonian")
        return np.array([self.basis.to_momentum(e) for e in np.eye(dim, dtype=complex)]).T

    def _momentum_dense(self, diag):
        F = self._fourier_matrix
        return F.conj().T @ (diag[:, None] * F)

    def dense_terms(self, c: Coefficients) -> dict:
        out = {"H1": self._momentum_dense(self.h1_diag(c)), "H2": np.diag(c.gradient * self.grad_sq).astype(complex)}
        if c.mixed == 0.0:
            out["H3"] = np.zeros_like(out["H1"])
        else:
            h3 = np.zeros_like(out["H1"])
            for x in range(self.lattice.volume):
                P = self._momentum_dense(self.basis.relative_momenta[x])
                g = self.grad_sq_sites[x]
                h3 += 0.5 * (P * g[None, :] + g[:, None] * P)
            out["H3"] = c.mixed * h3
        return out

    def dense(self, c: Coefficients, terms=TERMS) -> np.ndarray:
        d = self.dense_terms(c)
        return sum(d[t] for t in terms)


def build_hamiltonian(params, lattice, grid, tau, coupling_scale=1.0, frozen=True):
    """Return (family, coefficients) for H(tau) at interaction scale s."""
    if not 0.0 <= coupling_scale <= 1.0:
        raise DomainError(f"coupling scale must lie in [0, 1], got {coupling_scale}")
    fam = HamiltonianFamily.build(params, lattice, grid, frozen)
    return fam, fam.coefficients(tau, coupling_scale)


def norm_bounds(params: CosmologyParams, lattice, grid: FieldGridSpec, tau: float, s: float = 1.0):
    """Operator-norm bounds from the grid maxima zeta_max and pi_max."""
    c = coefficients(params, grid.cell, tau, s)
    V, d = lattice.volume, lattice.d
    grad_max = d * (2 * grid.zeta_max / lattice.b) ** 2
    pm = grid.pi_max
    b1 = V * (abs(c.kinetic) * pm**2 + abs(c.cubic) * pm**3)
    b2 = V * abs(c.gradient) * grad_max
    b3 = V * abs(c.mixed) * pm * grad_max
    return b1, b2, b3

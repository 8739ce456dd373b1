"""Free-vacuum synthesis as a discretised multivariate Gaussian on the field grid.

The k = 0 field mode is frozen at zero, so the Gaussian lives on the slice
sum_x zeta_x = 0 and uses the pseudo-inverse of the covariance there. The
Bunch-Davies state also carries a real quadratic phase exp(i b^d zeta.R.zeta/2),
where R is the real part of the vacuum's momentum-field kernel.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass

import numpy as np

from .background import CosmologyParams
from .encoding import FieldGridSpec, gaussian_leakage
from .errors import ConfigError, TruncationBudgetError
from .hilbert import FrozenSector, StateVector, make_basis
from .lattice_modes import LatticeSpec, lattice_omegas, modes, momentum_mass, wightman_matrix

POSDEF_TOL = 1e-12


@dataclass(frozen=True)
class CovarianceMatrix:
    M: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    phase: np.ndarray
    factor_seconds: float = 0.0

    @property
    def pseudo_inverse(self) -> np.ndarray:
        keep = self.eigenvalues > POSDEF_TOL * self.eigenvalues.max()
        U = self.eigenvectors[:, keep]
        return (U / self.eigenvalues[keep]) @ U.T

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["i", "j", "M"])
        for i, row in enumerate(self.M):
            for j, v in enumerate(row):
                w.writerow([i, j, repr(float(v))])
        return out.getvalue()


def phase_kernel(params: CosmologyParams, lattice: LatticeSpec, tau: float,
                 vacuum: str = "bunch_davies", tau_vac: float | None = None) -> np.ndarray:
    """Real part of the circulant kernel K with pi = K zeta on the vacuum."""
    om = lattice_omegas(lattice)
    nz = lattice.nonzero
    u, du = modes(params, om[nz], tau, vacuum, tau_vac)
    K = momentum_mass(params, tau) * np.conj(du) / np.conj(u)
    k = lattice.momenta[nz]
    sep = (lattice.coords[:, None, :] - lattice.coords[None, :, :]) * lattice.b
    ph = np.exp(1j * sep @ k.T)
    return (ph @ K.real).real / lattice.volume


def build_covariance(params: CosmologyParams, lattice: LatticeSpec, tau0: float | None = None,
                     vacuum: str = "bunch_davies", tau_vac: float | None = None) -> CovarianceMatrix:
    """Equal-time field covariance from the lattice Wightman sum, zero mode excluded."""
    tau0 = params.tau0 if tau0 is None else tau0
    M = wightman_matrix(params, lattice, tau0, tau0, "zz", vacuum, tau_vac)
    if np.abs(M.imag).max() > 1e-10 * np.abs(M.real).max():
        raise ConfigError("equal-time covariance came out complex")
    M = 0.5 * (M.real + M.real.T)
    t0 = time.perf_counter()
    w, U = np.linalg.eigh(M)
    elapsed = time.perf_counter() - t0
    uniform = np.ones(lattice.volume) / math.sqrt(lattice.volume)
    # the uniform direction carries the frozen mode and must be the only null direction
    overlap = np.abs(U.T @ uniform)
    null = int(np.argmax(overlap))
    rest = np.delete(w, null)
    if lattice.volume > 1 and not rest.min() > POSDEF_TOL * w.max():
        raise ConfigError("covariance is not positive definite off the zero mode")
    w = w.copy()
    w[null] = 0.0
    return CovarianceMatrix(M, w, U, phase_kernel(params, lattice, tau0, vacuum, tau_vac), elapsed)


def vacuum_grid(params: CosmologyParams, lattice: LatticeSpec, n_b: int, tau: float | None = None,
                vacuum: str = "bunch_davies", eps_jlp: float = 1e-3) -> FieldGridSpec:
    """Window that balances field and momentum resolution for the vacuum at tau.

    Chooses zeta_max so zeta_max / sigma_zeta = pi_max / sigma_pi per site.
    """
    tau = params.tau0 if tau is None else tau
    cell = lattice.b**lattice.d
    vz = wightman_matrix(params, lattice, tau, tau, "zz", vacuum).real[0, 0]
    vp = wightman_matrix(params, lattice, tau, tau, "pp", vacuum).real[0, 0]
    G = 2**n_b
    zeta_max = math.sqrt(math.pi * G * math.sqrt(vz) / (2.0 * cell * math.sqrt(vp)))
    return FieldGridSpec(zeta_max, n_b, cell, eps_jlp)


def synthesize_gaussian(cov: CovarianceMatrix, grid: FieldGridSpec, lattice: LatticeSpec,
                        frozen: bool = True, with_phase: bool = True) -> StateVector:
    """Amplitudes sqrt(p(zeta)) times the vacuum phase on grid points, normalised.

    Raises TruncationBudgetError when the Gaussian tail mass outside the
    window (union bound over sites) exceeds grid.eps_jlp.
    """
    leak = gaussian_leakage(np.diag(cov.M), grid.zeta_max)
    if leak > grid.eps_jlp:
        raise TruncationBudgetError(f"tail mass {leak:.3e} outside the window exceeds eps_jlp {grid.eps_jlp:.3e}")
    basis = make_basis(grid, lattice, frozen)
    levels = basis.levels
    zeta = grid.values[levels]
    Minv = cov.pseudo_inverse
    quad = np.einsum("ni,ij,nj->n", zeta, Minv, zeta)
    logamp = -0.25 * quad
    if with_phase:
        logamp = logamp + 0.5j * grid.cell * np.einsum("ni,ij,nj->n", zeta, cov.phase, zeta)
    amps = np.exp(logamp - logamp.real.max())
    if isinstance(basis, FrozenSector):
        amps = np.where(levels.sum(axis=1) == basis.target_sum, amps, 0.0)
    state = StateVector(amps, basis)
    state.discarded = leak
    return state.normalize()


def prepare_vacuum(params: CosmologyParams, lattice: LatticeSpec, grid: FieldGridSpec,
                   vacuum: str = "bunch_davies", frozen: bool = True) -> StateVector:
    cov = build_covariance(params, lattice, params.tau0, vacuum)
    return synthesize_gaussian(cov, grid, lattice, frozen)


def field_covariance(state: StateVector) -> np.ndarray:
    """<zeta(x) zeta(y)> on a state, computed exactly."""
    p = np.abs(state.amplitudes) ** 2
    z = np.array([state.basis.field_values(x) for x in range(state.lattice.volume)])
    return (z * p) @ z.T


def evolution_grid(params: CosmologyParams, lattice: LatticeSpec, n_b: int,
                   vacuum: str = "bunch_davies", eps_jlp: float = 1e-3) -> FieldGridSpec:
    """Balanced window at the geometric-mean time of [tau0, tau_end].

    The vacuum squeezes by e^N in field over the run, so balancing at either
    end starves the other; the midpoint splits the deficit evenly.
    """
    tau_mid = -math.sqrt(params.tau0 * params.tau_end)
    return vacuum_grid(params, lattice, n_b, tau_mid, vacuum, eps_jlp)

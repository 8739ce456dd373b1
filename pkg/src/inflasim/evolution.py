"""Trotterised time evolution, adiabatic vacuum preparation, commutator constants,
picture-equivalence checks and closed-form gate budgets."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import expm
from scipy.sparse.linalg import LinearOperator, eigsh

from .background import CosmologyParams, efolds
from .errors import ConfigError, DomainError, NumericalError, ResourceError
from .hamiltonian import DEFAULT_H3_SUBSTEPS, TERMS, Coefficients, HamiltonianFamily
from .hilbert import MAX_DENSE_DIM, StateVector, project_number_zero
from .lattice_modes import lattice_omegas

NORM_DRIFT_TOL = 1e-8
RESIDUAL_TOL = 1e-9
PICTURE_MAX_DIM = 1024
DENSE_GROUND_DIM = 1024
SUZUKI_P = 1.0 / (4.0 - 4.0 ** (1.0 / 3.0))

CoeffFn = Callable[[float], Coefficients]


@dataclass(frozen=True)
class TrotterPlan:
    order: int
    steps: int
    t_start: float
    t_end: float
    evaluation_rule: str | None = None
    splitting: tuple = TERMS
    h3_substeps: int = DEFAULT_H3_SUBSTEPS

    def __post_init__(self):
        if self.order not in (1, 2, 4):
            raise ConfigError(f"Trotter order must be 1, 2 or 4, got {self.order}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"steps must be a positive integer, got {self.steps}")
        rule = self.evaluation_rule or ("left_endpoint" if self.order == 1 else "midpoint")
        if rule not in ("left_endpoint", "midpoint"):
            raise ConfigError(f"unknown evaluation rule {rule!r}")
        if self.order > 1 and rule != "midpoint":
            raise ConfigError("orders 2 and 4 need midpoint evaluation")
        if set(self.splitting) - set(TERMS) or len(set(self.splitting)) != len(self.splitting):
            raise ConfigError(f"bad splitting {self.splitting!r}")
        object.__setattr__(self, "evaluation_rule", rule)

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.steps


def _apply_term(fam: HamiltonianFamily, label, psi, c, dt, substeps):
    if label == "H1":
        return fam.exp_h1(psi, c, dt)
    if label == "H2":
        return fam.exp_h2(psi, c, dt)
    return fam.exp_h3(psi, c, dt, substeps)


def _first_order(fam, psi, c, dt, plan):
    # exp(-i H1 dt) exp(-i H2 dt) exp(-i H3 dt): the rightmost factor acts first
    for label in reversed(plan.splitting):
        psi = _apply_term(fam, label, psi, c, dt, plan.h3_substeps)
    return psi


def _strang(fam, psi, coeff_fn, t0, dt, plan):
    c = coeff_fn(t0 + 0.5 * dt)
    labels = list(plan.splitting)
    for label in reversed(labels[1:]):
        psi = _apply_term(fam, label, psi, c, 0.5 * dt, plan.h3_substeps)
    psi = _apply_term(fam, labels[0], psi, c, dt, plan.h3_substeps)
    for label in labels[1:]:
        psi = _apply_term(fam, label, psi, c, 0.5 * dt, plan.h3_substeps)
    return psi


def _suzuki4(fam, psi, coeff_fn, t0, dt, plan):
    p = SUZUKI_P
    t = t0
    for w in (p, p, 1 - 4 * p, p, p):
        psi = _strang(fam, psi, coeff_fn, t, w * dt, plan)
        t += w * dt
    return psi


def trotter_step(fam, psi, coeff_fn: CoeffFn, t0: float, dt: float, plan: TrotterPlan):
    if plan.order == 1:
        return _first_order(fam, psi, coeff_fn(t0), dt, plan)
    if plan.order == 2:
        return _strang(fam, psi, coeff_fn, t0, dt, plan)
    return _suzuki4(fam, psi, coeff_fn, t0, dt, plan)


def trotter_evolve(state: StateVector, fam: HamiltonianFamily, coeff_fn: CoeffFn, plan: TrotterPlan,
                   callback: Callable | None = None) -> StateVector:
    """Evolve by the product formula of ``plan``; coeff_fn maps the evolution parameter to coefficients."""
    if state.basis.dim != fam.basis.dim or state.basis.frozen != fam.basis.frozen:
        raise ConfigError("state and Hamiltonian live on different bases")
    psi = state.amplitudes
    n0 = np.linalg.norm(psi)
    if plan.t_end == plan.t_start:
        return state.copy()
    dt = plan.dt
    for j in range(plan.steps):
        t = plan.t_start + j * dt
        psi = trotter_step(fam, psi, coeff_fn, t, dt, plan)
        if callback is not None:
            callback(j + 1, t + dt, psi)
    if abs(np.linalg.norm(psi) - n0) > NORM_DRIFT_TOL:
        raise NumericalError(f"norm drifted by {abs(np.linalg.norm(psi) - n0):.3e} during evolution")
    return state.with_amplitudes(psi)


def inflation_coefficients(fam: HamiltonianFamily, s: float = 1.0) -> CoeffFn:
    """Coefficients along conformal time at fixed interaction scale."""
    return lambda tau: fam.coefficients(tau, s)


def ramp_coefficients(fam: HamiltonianFamily, tau: float, T: float) -> CoeffFn:
    """Coefficients for the linear ramp s = t / T at fixed conformal time."""
    return lambda t: fam.coefficients(tau, min(max(t / T, 0.0), 1.0))


# -- dense oracle -------------------------------------------------------------------

def dense_diagonalize(H: np.ndarray, cap: int = MAX_DENSE_DIM):
    """Full Hermitian eigendecomposition; returns (eigenvalues, eigenvectors, ground vector)."""
    if H.shape[0] > cap:
        raise ResourceError(f"dense dimension {H.shape[0]} exceeds cap {cap}")
    H = 0.5 * (H + H.conj().T)
    w, U = np.linalg.eigh(H)
    g = U[:, 0]
    res = np.linalg.norm(H @ g - w[0] * g)
    if res > RESIDUAL_TOL * max(1.0, abs(w[0])):
        raise NumericalError(f"eigen-residual {res:.3e} above tolerance")
    return w, U, g


def slice_restrict(H: np.ndarray, basis) -> tuple[np.ndarray, np.ndarray]:
    """Restrict a frozen-sector matrix to the exact zero-mean slice (no wrapped copies)."""
    idx = np.flatnonzero(basis.levels.sum(axis=1) == basis.target_sum)
    return H[np.ix_(idx, idx)], idx


def interacting_ground_state(fam: HamiltonianFamily, tau: float, s: float = 1.0, zero_mean_slice: bool = True,
                             n_states: int = 1):
    """Lowest eigenpairs of H(tau, s); returns (eigenvalues, ground vector in the basis).

    Small instances use the dense oracle. Larger ones use Lanczos on the
    matrix-free action, with the same residual check.
    """
    c = fam.coefficients(tau, s)
    idx = np.arange(fam.basis.dim)
    if zero_mean_slice and fam.basis.frozen:
        idx = np.flatnonzero(fam.basis.levels.sum(axis=1) == fam.basis.target_sum)
    if idx.size <= DENSE_GROUND_DIM:
        H = fam.dense(c)[np.ix_(idx, idx)]
        w, _, g = dense_diagonalize(H)
    else:
        dim = fam.basis.dim

        def matvec(v):
            full = np.zeros(dim, dtype=complex)
            full[idx] = np.ravel(v)
            return fam.apply(full, c)[idx]

        op = LinearOperator((idx.size, idx.size), matvec=matvec, dtype=complex)
        v0 = np.ones(idx.size, dtype=complex)
        w, U = eigsh(op, k=max(n_states, 2), which="SA", tol=1e-13, v0=v0)
        order = np.argsort(w)
        w, U = w[order], U[:, order]
        g = U[:, 0]
        res = np.linalg.norm(matvec(g) - w[0] * g)
        if res > RESIDUAL_TOL * max(1.0, abs(w[0])):
            raise NumericalError(f"Lanczos residual {res:.3e} above tolerance")
    full = np.zeros(fam.basis.dim, dtype=complex)
    full[idx] = g
    return w, full


# -- adiabatic preparation ---------------------------------------------------------

@dataclass
class AdiabaticResult:
    state: StateVector
    discarded: float
    trace: list = field(default_factory=list)
    overlap: float | None = None
    infidelity: float | None = None
    energy: float | None = None

    def trace_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["step", "s", "norm", "energy", "discarded"])
        for row in self.trace:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return out.getvalue()


def lowest_modes(lattice) -> list[int]:
    """Indices of the nonzero momenta with the smallest frequency."""
    om = lattice_omegas(lattice)
    nz = np.flatnonzero(lattice.nonzero)
    if nz.size == 0:
        return []
    m = om[nz].min()
    return [int(i) for i in nz if abs(om[i] - m) < 1e-12 * max(1.0, m)]


def adiabatic_prepare(state: StateVector, fam: HamiltonianFamily, T: float, steps: int, order: int = 2,
                      project_until: float = 0.1, project_modes=None, target: np.ndarray | None = None,
                      trace_every: int = 0) -> AdiabaticResult:
    """Ramp s = t/T from 0 to 1 at tau0, projecting N_k = 0 during the first part of the ramp."""
    if T <= 0:
        raise DomainError(f"ramp duration must be positive, got {T}")
    if not 0.0 <= project_until <= 1.0:
        raise DomainError("project_until must lie in [0, 1]")
    params = fam.params
    tau = params.tau0
    plan = TrotterPlan(order, steps, 0.0, T)
    coeff_fn = ramp_coefficients(fam, tau, T)
    modes = lowest_modes(state.lattice) if project_modes is None else list(project_modes)
    n_proj = int(math.floor(project_until * steps + 1e-9))
    psi = state.copy()
    total_discard = 0.0
    trace = []
    dt = plan.dt
    for j in range(steps):
        amps = trotter_step(fam, psi.amplitudes, coeff_fn, j * dt, dt, plan)
        psi = psi.with_amplitudes(amps)
        if j < n_proj:
            for k in modes:
                psi, disc = project_number_zero(psi, params, k, tau)
                total_discard = 1.0 - (1.0 - total_discard) * (1.0 - disc)
        if trace_every and ((j + 1) % trace_every == 0 or j + 1 == steps):
            c = coeff_fn((j + 1) * dt)
            trace.append((j + 1, (j + 1) / steps, psi.norm, fam.energy(psi.amplitudes, c), total_discard))
    if abs(psi.norm - 1.0) > NORM_DRIFT_TOL:
        raise NumericalError(f"norm drifted by {abs(psi.norm - 1.0):.3e} during the ramp")
    res = AdiabaticResult(psi, total_discard, trace)
    res.energy = fam.energy(psi.amplitudes, fam.coefficients(tau, 1.0))
    if target is not None:
        ov = abs(np.vdot(target, psi.amplitudes))
        res.overlap = float(ov)
        res.infidelity = float(1.0 - ov**2)
    return res


# -- commutator constant -----------------------------------------------------------

def alpha_com(terms, order: int) -> float:
    """Sum over all chains of nested commutators of length order + 1 of their spectral norms.

    ``terms`` is a list of dense Hermitian matrices (dimension <= 4096).
    """
    terms = [np.asarray(t) for t in terms]
    if terms and terms[0].shape[0] > MAX_DENSE_DIM:
        raise ResourceError("alpha_com needs a dense-representable instance; use alpha_com_bound")
    length = order + 1
    total = 0.0

    def walk(inner, depth):
        nonlocal total
        if depth == length:
            total += np.linalg.norm(inner, 2)
            return
        for A in terms:
            nxt = A @ inner - inner @ A
            if np.abs(nxt).max() == 0.0:
                continue
            walk(nxt, depth + 1)

    for B in terms:
        if np.abs(B).max() > 0:
            walk(B, 1)
    return float(total)


def alpha_com_bound(norms, order: int) -> float:
    """Bound from ||[A, B]|| <= 2 ||A|| ||B||, labelled as a bound rather than a value."""
    s = float(sum(norms))
    return 2.0**order * s ** (order + 1)


# -- picture equivalence -----------------------------------------------------------

def _propagators(H_fn, taus):
    """U(tau_j, tau_0) on a grid by midpoint exponentials; later factors multiply from the left."""
    dim = H_fn(taus[0]).shape[0]
    Us = [np.eye(dim, dtype=complex)]
    for a, b in zip(taus[:-1], taus[1:]):
        Us.append(expm(-1j * (b - a) * H_fn(0.5 * (a + b))) @ Us[-1])
    return Us


def picture_equivalence_check(H_fn, H0_fn, observable, tau0: float, tau1: float, tau2: float,
                              steps: int = 10_000) -> dict:
    """Check both picture theorems on a dense toy; returns the deviations.

    heisenberg: O_H(tau2) against X^dagger O_H(tau1) X, with X built as the
    anti-time-ordered product of exp(-i H_H dt) over [tau1, tau2] (earlier
    factors on the left), since X = U_S^dagger(tau1) U_S(tau2).
    interaction: U_0^dagger U_S against the time-ordered exponential of
    U_0^dagger H_I U_0 over [tau0, tau2].
    """
    if not tau0 <= tau1 < tau2:
        raise DomainError("need tau0 <= tau1 < tau2")
    dim = H_fn(tau1).shape[0]
    if dim > PICTURE_MAX_DIM:
        raise ResourceError(f"picture check dimension {dim} exceeds {PICTURE_MAX_DIM}")
    taus = np.linspace(tau0, tau2, steps + 1)
    i1 = int(np.argmin(np.abs(taus - tau1)))
    taus[i1] = tau1
    mids = 0.5 * (taus[:-1] + taus[1:])
    # fine propagators at the grid points and, for the generators, at midpoints
    U = _propagators(H_fn, taus)
    U0 = _propagators(H0_fn, taus)

    def half_step(Uj, fn, a, m):
        return expm(-1j * (m - a) * fn(0.5 * (a + m))) @ Uj

    O = np.asarray(observable)
    X = np.eye(dim, dtype=complex)
    for j in range(i1, steps):
        a, b, m = taus[j], taus[j + 1], mids[j]
        Um = half_step(U[j], H_fn, a, m)
        HH = Um.conj().T @ H_fn(m) @ Um
        X = X @ expm(-1j * (b - a) * HH)
    O1 = U[i1].conj().T @ O @ U[i1]
    O2 = U[-1].conj().T @ O @ U[-1]
    dev_h = float(np.abs(X.conj().T @ O1 @ X - O2).max())
    dev_x = float(np.abs(X - U[i1].conj().T @ U[-1]).max())

    UI = np.eye(dim, dtype=complex)
    for j in range(steps):
        a, b, m = taus[j], taus[j + 1], mids[j]
        U0m = half_step(U0[j], H0_fn, a, m)
        HI = U0m.conj().T @ (H_fn(m) - H0_fn(m)) @ U0m
        UI = expm(-1j * (b - a) * HI) @ UI
    dev_i = float(np.abs(UI - U0[-1].conj().T @ U[-1]).max())
    return {"heisenberg": max(dev_h, dev_x), "interaction": dev_i, "max": max(dev_h, dev_x, dev_i)}


# -- budgets -----------------------------------------------------------------------

@dataclass(frozen=True)
class ResourceBudget:
    n_ad_total: float
    n_inflation_total: float
    eps_ad: float
    eps_inflation: float
    alpha_com: float | None = None
    alpha_com_is_bound: bool = True
    expansion_factor: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


def gate_budgets(params: CosmologyParams, volume: int, eps_jlp: float, k: int, T: float,
                 n_inflation: float, n_ad: float | None = None, coupling: float = 1.0,
                 alpha: float | None = None, alpha_is_bound: bool = True) -> ResourceBudget:
    """Closed-form gate and error estimates for a 2k-th order product formula.

    These are order-of-magnitude estimates with all O(1) constants set to one.
    ``expansion_factor`` reports (1 - e^-N)^(1 + 1/2k) separately from the
    e^N growth.
    """
    if k < 1 or volume < 1 or not 0 < eps_jlp < 1 or T <= 0 or n_inflation <= 0 or coupling < 0:
        raise DomainError("gate_budgets needs k >= 1, V >= 1, 0 < eps_jlp < 1, T > 0, n > 0")
    V, eJ, eps = float(volume), eps_jlp, params.epsilon
    tau0 = abs(params.tau0)
    N = efolds(params)
    q = 1.0 / (2 * k)
    n_ad_total = (coupling**q * V ** (2 + 3 * q / 2) / eJ ** (1 + 3 * q / 2)
                  * T ** (1 + q) * (tau0**2 / eps**1.5) ** q)
    shrink = 1.0 - math.exp(-N)
    n_infl_total = tau0**q * shrink ** (1 + q) * V ** (2 + 5 * q / 2) / (math.exp(-N) * eJ ** (1 + 3 * q))
    n_ad = n_ad_total / V if n_ad is None else n_ad
    eps_ad = coupling * (V / eJ) ** (2 * k + 1.5) * tau0**2 * T ** (2 * k + 1) / (n_ad ** (2 * k) * eps**1.5)
    eps_infl = (V ** (2 * k + 2.5) / eJ ** (2 * k + 1.5) * tau0 * shrink ** (2 * k + 1)
                / (math.exp(-N) * n_inflation) ** (2 * k))
    return ResourceBudget(n_ad_total, n_infl_total, eps_ad, eps_infl, alpha, alpha_is_bound, shrink ** (1 + q))


def lattice_error_budget(params: CosmologyParams, b: float, kappa: float, k_norm: float):
    """(tree-level O(b^2) scale, one-loop b^4 correction) with Hdot = -eps H^2.

    The tree scale is reported as (H b)^2, the dimensionless lattice suppression.
    """
    if b <= 0 or k_norm <= 0:
        raise DomainError("lattice_error_budget needs b > 0 and k > 0")
    H = params.H
    if not H * b < 1:
        raise DomainError(f"need H b < 1, got {H * b}")
    tree = (H * b) ** 2
    loop = b**4 * kappa**2 * H**14 / params.H_dot**4 / k_norm**3 * math.log(H * b)
    return tree, loop


def commutator_terms(fam: HamiltonianFamily, c: Coefficients, labels=TERMS):
    d = fam.dense_terms(c)
    return [d[t] for t in labels]


def measured_trotter_error(state, fam, coeff_fn, order, steps, t_start, t_end, reference) -> float:
    plan = TrotterPlan(order, steps, t_start, t_end)
    out = trotter_evolve(state, fam, coeff_fn, plan)
    return float(np.linalg.norm(out.amplitudes - reference))



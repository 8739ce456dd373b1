"""Correlators on states, power spectrum and bispectrum extraction, and first-order in-in oracles."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad_vec

from .background import CosmologyParams
from .encoding import hkll_kernel
from .errors import ConfigError, DomainError, NumericalError
from .hamiltonian import coefficients
from .hilbert import StateVector, apply_relative_pi
from .lattice_modes import LatticeSpec, continuum_mode_function, modes, momentum_mass, wightman_matrix

DEFAULT_DAMPING = 0.01
INTEGRAL_RTOL = 1e-8


@dataclass(frozen=True)
class CorrelatorResult:
    kind: str
    arguments: tuple
    value: complex
    estimator: str = "exact"
    shots: int = 0
    std_error: float = 0.0

    def row(self):
        return list(self.arguments) + [repr(float(np.real(self.value))), repr(float(np.imag(self.value))),
                                       self.estimator, self.shots, repr(float(self.std_error))]


def correlator_csv(results) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    width = max(len(r.arguments) for r in results) if results else 0
    w.writerow([f"site{i}" for i in range(width)] + ["re", "im", "estimator", "shots", "std_error"])
    for r in results:
        args = list(r.arguments) + [""] * (width - len(r.arguments))
        w.writerow(args + r.row()[len(r.arguments):])
    return out.getvalue()


# -- exact expectations -------------------------------------------------------------

def _field_product(state: StateVector, sites) -> np.ndarray:
    out = np.ones(state.basis.dim)
    for x in sites:
        out = out * state.basis.field_values(x)
    return out


def expect_fields(state: StateVector, sites) -> float:
    """<zeta(x1) ... zeta(xn)> for field operators at the given site indices."""
    if len(sites) > 3:
        raise DomainError("observables are limited to degree 3")
    p = np.abs(state.amplitudes) ** 2
    return float(np.dot(p, _field_product(state, sites)) / np.sum(p))


def expect(state: StateVector, word) -> complex:
    """<psi| O_1 O_2 ... |psi> for a word of ('zeta', site) / ('pi', site) factors.

    ``pi`` is the momentum with its k = 0 part removed. An empty word gives the norm.
    """
    if len(word) > 3:
        raise DomainError("observables are limited to degree 3")
    phi = state
    for kind, site in reversed(list(word)):
        if kind == "zeta":
            phi = phi.with_amplitudes(phi.basis.field_values(site) * phi.amplitudes)
        elif kind == "pi":
            phi = apply_relative_pi(phi, site)
        else:
            raise DomainError(f"unknown operator kind {kind!r}")
    return complex(np.vdot(state.amplitudes, phi.amplitudes) / state.norm**2)


def two_point_table(state: StateVector) -> np.ndarray:
    """<zeta(x) zeta(y)> for all site pairs."""
    p = np.abs(state.amplitudes) ** 2
    p = p / p.sum()
    z = np.array([state.basis.field_values(x) for x in range(state.lattice.volume)])
    return (z * p) @ z.T


def three_point_table(state: StateVector) -> np.ndarray:
    """T[y, z] = <zeta(0) zeta(y) zeta(z)> with the first field at site 0."""
    p = np.abs(state.amplitudes) ** 2
    p = p / p.sum()
    z = np.array([state.basis.field_values(x) for x in range(state.lattice.volume)])
    return np.einsum("n,n,yn,zn->yz", p, z[0], z, z)


def reconstructed_field(state: StateVector, params: CosmologyParams, tau: float, site: int,
                        tau0: float | None = None) -> StateVector:
    """Apply the kernel-reconstructed zeta(tau, x) = sum_y K_z zeta(y) + K_p pi(y) to a tau0-slice state."""
    lat = state.lattice
    ker = hkll_kernel(params, lat, tau, lat.coords[site], tau0=tau0)
    out = np.zeros_like(state.amplitudes)
    for y, kz, kp in zip(ker.support, ker.K_zeta, ker.K_pi):
        j = lat.site_index(y)
        out = out + kz * state.basis.field_values(j) * state.amplitudes
        if kp != 0.0:
            out = out + kp * apply_relative_pi(state, j).amplitudes
    return state.with_amplitudes(out)


def reconstructed_two_point(state, params, tau, x, y, tau0=None) -> complex:
    rx = reconstructed_field(state, params, tau, x, tau0)
    ry = reconstructed_field(state, params, tau, y, tau0)
    return complex(np.vdot(rx.amplitudes, ry.amplitudes) / state.norm**2)


def kernel_two_point(params, lattice, tau, tau0=None, vacuum="bunch_davies") -> np.ndarray:
    """Reconstructed <zeta(tau) zeta(tau)> from tau0-slice correlators, at the operator level."""
    from .encoding import kernel_matrices
    tau0 = params.tau0 if tau0 is None else tau0
    Kz, Kp = kernel_matrices(params, lattice, tau, tau0)
    C = {k: wightman_matrix(params, lattice, tau0, tau0, k, vacuum) for k in ("zz", "zp", "pz", "pp")}
    return Kz @ C["zz"] @ Kz.T + Kz @ C["zp"] @ Kp.T + Kp @ C["pz"] @ Kz.T + Kp @ C["pp"] @ Kp.T


# -- sampling -------------------------------------------------------------------------

def sample_estimate(state: StateVector, sites, shots: int, seed: int) -> CorrelatorResult:
    """Monte-Carlo estimate of a diagonal field product from |amplitude|^2 draws."""
    if shots <= 0:
        raise ConfigError("shots must be positive")
    rng = np.random.default_rng(seed)
    p = np.abs(state.amplitudes) ** 2
    p = p / p.sum()
    idx = rng.choice(p.size, size=shots, p=p)
    vals = _field_product(state, sites)[idx]
    err = float(vals.std(ddof=1) / math.sqrt(shots)) if shots > 1 else float("inf")
    return CorrelatorResult("three_point" if len(sites) == 3 else "two_point", tuple(int(s) for s in sites),
                            complex(vals.mean()), "sampled", shots, err)


# -- spectra ------------------------------------------------------------------------------

def power_spectrum(table: np.ndarray, lattice: LatticeSpec) -> np.ndarray:
    """P(k) = k^3/(2 pi^2) sum_u b^d f(u) e^{-i k.u} at every nonzero dual momentum.

    ``table`` holds f at each site separation, indexed like ``lattice.coords``.
    """
    f = np.asarray(table)
    k = lattice.momenta[lattice.nonzero]
    u = lattice.coords * lattice.b
    ft = (np.exp(-1j * k @ u.T) @ f) * lattice.b**lattice.d
    kn = np.linalg.norm(k, axis=1)
    return (kn**3 / (2 * math.pi**2) * ft).real


def plateau(params: CosmologyParams) -> float:
    """Superhorizon power H^2 / (8 pi^2 c_s eps)."""
    return params.H**2 / (8 * math.pi**2 * params.c_s * params.epsilon)


def continuum_power_spectrum(params: CosmologyParams, k, tau: float):
    k = np.asarray(k, dtype=float)
    v = continuum_mode_function(params, k, tau)
    return k**3 * np.abs(v) ** 2 / (2 * math.pi**2)


def lattice_power_spectrum(params: CosmologyParams, lattice: LatticeSpec, tau: float) -> np.ndarray:
    W = wightman_matrix(params, lattice, tau, tau, "zz")
    return power_spectrum(W[:, 0].real, lattice)


def bispectrum(table: np.ndarray, lattice: LatticeSpec, k1: int, k2: int, k3: int, P: float) -> float:
    """F from a position-space table T[y, z] = <zeta(0) zeta(y) zeta(z)>.

    The delta function is integrated out by fixing the first argument at the
    origin; B = sum_{y,z} b^{2d} e^{-i(k2.y + k3.z)} T[y, z].
    """
    mom = lattice.momenta
    total = (lattice.coords[k1] + lattice.coords[k2] + lattice.coords[k3]) % lattice.L_hat
    if np.any(total != 0):
        raise DomainError("momentum triple does not conserve lattice momentum")
    u = lattice.coords * lattice.b
    e2 = np.exp(-1j * u @ mom[k2])
    e3 = np.exp(-1j * u @ mom[k3])
    B = (e2 @ np.asarray(table) @ e3) * lattice.b ** (2 * lattice.d)
    norms = [np.linalg.norm(mom[i]) for i in (k1, k2, k3)]
    return float((B * np.prod(norms) ** 2 / ((2 * math.pi) ** 4 * P**2)).real)


def shape_from_B(B: float, ks, P: float) -> float:
    k1, k2, k3 = ks
    return B * (k1 * k2 * k3) ** 2 / ((2 * math.pi) ** 4 * P**2)


def bispectrum_reference(params: CosmologyParams, k1: float, k2: float, k3: float, as_printed: bool = False) -> float:
    """Closed-form F for general single-field inflation, reference only.

    With ``as_printed`` the middle term uses the denominator 2 k1; otherwise
    the dimensionally consistent 2 k1 k2 k3 K^2.
    """
    cs2 = params.c_s**2
    K = k1 + k2 + k3
    lam_term = (1 / cs2 - 1 - 2 * params.lambda_c / params.Sigma) * 3 * k1 * k2 * k3 / (2 * K**3)
    t1 = -(k1**2 * k2**2 + k1**2 * k3**2 + k2**2 * k3**2) / (k1 * k2 * k3 * K)
    num = (k1**2 * k2**3 + k1**2 * k3**3 + k2**2 * k3**3 + k2**2 * k1**3 + k3**2 * k1**3 + k3**2 * k2**3)
    t2 = num / (2 * k1) if as_printed else num / (2 * k1 * k2 * k3 * K**2)
    t3 = (k1**3 + k2**3 + k3**3) / (8 * k1 * k2 * k3)
    return lam_term + (1 / cs2 - 1) * (t1 + t2 + t3)


# -- in-in oracles ------------------------------------------------------------------

def _vertex_coeffs(params, tau):
    c = coefficients(params, 1.0, tau, 1.0)
    return c.cubic, c.mixed


def inin_tree(params: CosmologyParams, ks, tau0: float | None = None, tau_end: float | None = None,
              damping: float = DEFAULT_DAMPING, rtol: float = INTEGRAL_RTOL) -> float:
    """First-order in-in value of B(k1, k2, k3) with continuum Bunch-Davies modes.

    <zeta zeta zeta> = (2 pi)^3 delta(sum k) B. The early-time contour
    rotation is emulated by the factor exp(damping * c_s * K * tau').
    """
    if damping <= 0:
        raise DomainError("damping must be positive")
    tau0 = params.tau0 if tau0 is None else tau0
    tau_end = params.tau_end if tau_end is None else tau_end
    k = np.asarray(ks, dtype=float)
    if k.shape != (3,) or np.any(k <= 0):
        raise DomainError("need three positive momentum magnitudes")
    if k.max() > k.sum() - k.max() + 1e-12:
        raise DomainError("momentum magnitudes do not close a triangle")
    lam_c, mix_c = _vertex_coeffs(params, tau_end)
    if params.lambda_c == 0 and mix_c == 0:
        return 0.0
    cs = params.c_s
    K = k.sum()
    v_end, _ = modes(params, k, tau_end)
    # k_b . k_c for the leg pair opposite each a
    dots = np.array([(k[0] ** 2 - k[1] ** 2 - k[2] ** 2) / 2, (k[1] ** 2 - k[0] ** 2 - k[2] ** 2) / 2,
                     (k[2] ** 2 - k[0] ** 2 - k[1] ** 2) / 2])

    def integrand(t):
        cl, cm = _vertex_coeffs(params, t)
        u, du = modes(params, k, t)
        m = momentum_mass(params, t)
        Gz = v_end * np.conj(u)
        Gp = v_end * m * np.conj(du)
        val = 12 * cl * np.prod(Gp)
        if cm != 0.0:
            # pi leg on a, gradient legs on the other two
            s = sum(-dots[a] * Gp[a] * np.prod(np.delete(Gz, a)) for a in range(3))
            val = val + 4 * cm * s
        return float(np.imag(val) * math.exp(damping * cs * K * t))

    res, err = quad_vec(integrand, tau0, tau_end, epsrel=rtol, epsabs=0.0, limit=20000)
    if not np.isfinite(res) or err > max(1e3 * rtol * abs(res), 1e-300):
        raise NumericalError(f"in-in quadrature did not converge (estimate {res:.3e}, error {err:.3e})")
    return float(res)


def inin_lattice(params: CosmologyParams, lattice: LatticeSpec, tau0: float | None = None,
                 tau_end: float | None = None, rtol: float = 1e-10) -> np.ndarray:
    """First-order three-point table T[y, z] = <zeta(0) zeta(y) zeta(z)> on the lattice.

    Uses lattice mode functions, the lattice vertices (site momenta cubed and
    the symmetrised forward-difference gradient term) and a sudden start at
    tau0 without damping, matching a statevector run from the free vacuum.
    """
    tau0 = params.tau0 if tau0 is None else tau0
    tau_end = params.tau_end if tau_end is None else tau_end
    V, d, b = lattice.volume, lattice.d, lattice.b
    fwd = [np.array([lattice.neighbour(x, ax, 1) for x in range(V)]) for ax in range(d)]

    def integrand(t):
        c = coefficients(params, b**d, t, 1.0)
        Fp = wightman_matrix(params, lattice, tau_end, t, "zp")
        val = 12 * c.cubic * np.einsum("x,yx,zx->yz", Fp[0], Fp, Fp)
        if c.mixed != 0.0:
            Fz = wightman_matrix(params, lattice, tau_end, t, "zz")
            for nb in fwd:
                D = (Fz[:, nb] - Fz) / b
                s = (np.einsum("x,yx,zx->yz", Fp[0], D, D) + np.einsum("x,yx,zx->yz", D[0], Fp, D)
                     + np.einsum("x,yx,zx->yz", D[0], D, Fp))
                val = val + 4 * c.mixed * s
        return np.imag(val)

    res, err = quad_vec(integrand, tau0, tau_end, epsrel=rtol, epsabs=0.0, limit=20000)
    return np.asarray(res)

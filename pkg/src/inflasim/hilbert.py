"""Truncated field-basis Hilbert space, site operators and diagonal-mode ladders.

Index layout: amplitudes over the product grid are stored site-major in
mixed radix G, i.e. ``psi[j_0, j_1, ..., j_{V-1}]`` flattened in C order, with
``j_x`` the field level at the site whose ``LatticeSpec.coords`` row is x.

Two bases are provided. :class:`FullBasis` is the plain G**V product grid.
:class:`FrozenSector` holds the states with the k = 0 field mode pinned to
zero: sum_x j_x = V (G-1)/2 mod G. Its dimension is G**(V-1) and every
operator used by the Hamiltonian preserves it exactly.
"""

from __future__ import annotations

import json
import struct
import sys
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

from .background import CosmologyParams, scale_factor
from .encoding import FieldGridSpec
from .errors import ConfigError, DomainError, EmptySectorError, ResourceError
from .lattice_modes import LatticeSpec, lattice_omegas

MAX_AMPLITUDES = 2**24
MAX_DENSE_DIM = 4096
NUMBER_THRESHOLD = 0.5
EMPTY_NORM = 1e-12
NUMBER_CACHE_SIZE = 8

_MAGIC = b"INFS"


def check_dimension(dim: int, cap: int = MAX_AMPLITUDES, what: str = "state"):
    if dim > cap:
        raise ResourceError(f"{what} dimension {dim} exceeds cap {cap}")


def odd_difference(n: np.ndarray, G: int) -> np.ndarray:
    """Minimum-image integer difference mod G, with the Nyquist value set to 0."""
    w = (np.asarray(n) + G // 2) % G - G // 2
    return np.where(w == -(G // 2), 0, w)


class _Basis:
    grid: FieldGridSpec
    lattice: LatticeSpec

    @property
    def G(self) -> int:
        return self.grid.G

    @property
    def V(self) -> int:
        return self.lattice.volume

    def field_values(self, site: int) -> np.ndarray:
        return self.grid.values[self.levels[:, site]]

    @cached_property
    def relative_momenta(self) -> np.ndarray:
        """pi_x - mean(pi) for each site, diagonal in the momentum basis, shape (V, dim)."""
        m = self.momentum_indices
        G = self.G
        out = np.zeros((self.V, m.shape[0]))
        for x in range(self.V):
            out[x] = odd_difference(m[:, [x]] - m, G).sum(axis=1)
        return out * self.grid.delta_pi / self.V

    def momentum_apply(self, diag: np.ndarray, psi: np.ndarray) -> np.ndarray:
        return self.from_momentum(diag * self.to_momentum(psi))


@dataclass(frozen=True, eq=False)
class FullBasis(_Basis):
    grid: FieldGridSpec
    lattice: LatticeSpec

    def __post_init__(self):
        check_dimension(self.dim)

    @property
    def frozen(self) -> bool:
        return False

    @property
    def dim(self) -> int:
        return self.G**self.V

    @property
    def shape(self):
        return (self.G,) * self.V

    @cached_property
    def levels(self) -> np.ndarray:
        return np.indices(self.shape).reshape(self.V, -1).T

    @property
    def momentum_indices(self) -> np.ndarray:
        return self.levels

    @cached_property
    def _prephase(self) -> np.ndarray:
        c = (self.G - 1) / 2.0
        return np.exp(2j * np.pi * c * np.arange(self.G) / self.G)

    def _phase_all(self, psi, sign):
        t = psi.reshape(self.shape)
        ph = self._prephase if sign > 0 else np.conj(self._prephase)
        for ax in range(self.V):
            shp = [1] * self.V
            shp[ax] = self.G
            t = t * ph.reshape(shp)
        return t

    def to_momentum(self, psi):
        t = self._phase_all(psi, +1)
        return np.fft.fftn(t, norm="ortho").ravel()

    def from_momentum(self, phi):
        t = np.fft.ifftn(phi.reshape(self.shape), norm="ortho")
        return self._phase_all(t, -1).ravel()

    def index_of(self, levels) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.asarray(levels).T), self.shape)

    def site_to_momentum(self, psi, site):
        """Centred unitary DFT on one site only."""
        t = psi.reshape(self.shape)
        shp = [1] * self.V
        shp[site] = self.G
        t = t * self._prephase.reshape(shp)
        return np.fft.fft(t, axis=site, norm="ortho").ravel()

    def site_from_momentum(self, phi, site):
        t = np.fft.ifft(phi.reshape(self.shape), axis=site, norm="ortho")
        shp = [1] * self.V
        shp[site] = self.G
        return (t * np.conj(self._prephase).reshape(shp)).ravel()

    def site_momentum_values(self, site) -> np.ndarray:
        return self.grid.pi_values[self.levels[:, site]]


@dataclass(frozen=True, eq=False)
class FrozenSector(_Basis):
    """States with sum_x j_x = V (G-1)/2 (mod G); needs an even number of sites."""

    grid: FieldGridSpec
    lattice: LatticeSpec

    def __post_init__(self):
        if (self.V * (self.G - 1)) % 2:
            raise DomainError("the frozen zero-mode sector needs an even number of sites")
        check_dimension(self.dim)

    @property
    def frozen(self) -> bool:
        return True

    @property
    def dim(self) -> int:
        return self.G ** (self.V - 1)

    @property
    def shape(self):
        return (self.G,) * (self.V - 1)

    @property
    def target_sum(self) -> int:
        return self.V * (self.G - 1) // 2

    @cached_property
    def levels(self) -> np.ndarray:
        free = np.indices(self.shape).reshape(self.V - 1, -1).T
        last = np.mod(self.target_sum - free.sum(axis=1), self.G)
        return np.concatenate([free, last[:, None]], axis=1)

    @cached_property
    def _gauge(self) -> np.ndarray:
        t = (self.levels.sum(axis=1) - self.target_sum) // self.G
        return np.where(t % 2 == 0, 1.0, -1.0)

    @cached_property
    def momentum_indices(self) -> np.ndarray:
        free = np.indices(self.shape).reshape(self.V - 1, -1).T
        return np.concatenate([free, np.zeros((free.shape[0], 1), dtype=int)], axis=1)

    def index_of(self, levels) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.asarray(levels)[:, :-1].T), self.shape)

    def to_momentum(self, psi):
        t = (self._gauge * psi).reshape(self.shape)
        return np.fft.fftn(t, norm="ortho").ravel()

    def from_momentum(self, phi):
        t = np.fft.ifftn(phi.reshape(self.shape), norm="ortho").ravel()
        return self._gauge * t

    @cached_property
    def full_index(self) -> np.ndarray:
        return np.ravel_multi_index(tuple(self.levels.T), (self.G,) * self.V)

    def embed(self, psi) -> np.ndarray:
        out = np.zeros(self.G**self.V, dtype=complex)
        out[self.full_index] = psi
        return out

    def restrict(self, full) -> np.ndarray:
        return np.asarray(full)[self.full_index]


def make_basis(grid: FieldGridSpec, lattice: LatticeSpec, frozen: bool = True):
    return FrozenSector(grid, lattice) if frozen else FullBasis(grid, lattice)


@dataclass
class StateVector:
    amplitudes: np.ndarray
    basis: _Basis
    discarded: float = field(default=0.0)

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex).ravel()
        if self.amplitudes.size != self.basis.dim:
            raise ConfigError(f"amplitude length {self.amplitudes.size} != basis dim {self.basis.dim}")

    @property
    def grid(self) -> FieldGridSpec:
        return self.basis.grid

    @property
    def lattice(self) -> LatticeSpec:
        return self.basis.lattice

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalize(self) -> "StateVector":
        n = self.norm
        if n < EMPTY_NORM:
            raise EmptySectorError("cannot normalise a null state")
        self.amplitudes = self.amplitudes / n
        return self

    def copy(self) -> "StateVector":
        return StateVector(self.amplitudes.copy(), self.basis, self.discarded)

    def with_amplitudes(self, amps) -> "StateVector":
        return StateVector(amps, self.basis, self.discarded)

    def full_amplitudes(self) -> np.ndarray:
        return self.basis.embed(self.amplitudes) if self.basis.frozen else self.amplitudes

    def to_full(self) -> "StateVector":
        return StateVector(self.full_amplitudes(), FullBasis(self.grid, self.lattice), self.discarded)

    def inner(self, other: "StateVector") -> complex:
        return complex(np.vdot(self.amplitudes, other.amplitudes))

    @classmethod
    def basis_state(cls, basis: _Basis, index: int) -> "StateVector":
        a = np.zeros(basis.dim, dtype=complex)
        a[index] = 1.0
        return cls(a, basis)


# -- site operators --------------------------------------------------------------

def apply_zeta(state: StateVector, site: int, exponent: int = 1) -> StateVector:
    """Multiply by zeta(x)**exponent, diagonal in the field basis."""
    if exponent == 0:
        return state.copy()
    return state.with_amplitudes(state.basis.field_values(site) ** exponent * state.amplitudes)


def apply_pi(state: StateVector, site: int, exponent: int = 1) -> StateVector:
    """Apply the single-site conjugate momentum pi(x)**exponent.

    This is the raw per-site operator (centred DFT, diagonal momenta). It does
    not preserve the frozen sector, so frozen states are embedded first.
    """
    if exponent == 0:
        return state.copy()
    st = state.to_full() if state.basis.frozen else state
    b = st.basis
    phi = b.site_to_momentum(st.amplitudes, site)
    phi = b.site_momentum_values(site) ** exponent * phi
    return st.with_amplitudes(b.site_from_momentum(phi, site))


def apply_relative_pi(state: StateVector, site: int, exponent: int = 1) -> StateVector:
    """Apply (pi(x) - mean pi)**exponent, the momentum with the k = 0 part removed."""
    if exponent == 0:
        return state.copy()
    b = state.basis
    return state.with_amplitudes(b.momentum_apply(b.relative_momenta[site] ** exponent, state.amplitudes))


def weyl_clock(state: StateVector, site: int, theta: float) -> StateVector:
    """exp(i theta zeta(x))."""
    return state.with_amplitudes(np.exp(1j * theta * state.basis.field_values(site)) * state.amplitudes)


def weyl_shift(state: StateVector, site: int, phi: float) -> StateVector:
    """exp(i phi b^d pi(x)) on the full basis."""
    st = state.to_full() if state.basis.frozen else state
    b = st.basis
    ph = b.site_to_momentum(st.amplitudes, site)
    ph = np.exp(1j * phi * st.grid.cell * b.site_momentum_values(site)) * ph
    return st.with_amplitudes(b.site_from_momentum(ph, site))


# -- Fourier components and ladders -----------------------------------------------

def fourier_weights(lattice: LatticeSpec, k_index: int) -> np.ndarray:
    """b^d exp(-i k.x) for every site."""
    k = lattice.momenta[k_index]
    return lattice.b**lattice.d * np.exp(-1j * (lattice.coords * lattice.b) @ k)


def apply_zeta_k(state: StateVector, k_index: int) -> StateVector:
    """zeta_k = sum_x b^d e^{-ik.x} zeta(x)."""
    b = state.basis
    w = fourier_weights(state.lattice, k_index)
    diag = sum(w[x] * b.field_values(x) for x in range(b.V))
    return state.with_amplitudes(diag * state.amplitudes)


def apply_pi_k(state: StateVector, k_index: int) -> StateVector:
    """pi_k built from the zero-mode-free site momenta."""
    b = state.basis
    w = fourier_weights(state.lattice, k_index)
    diag = w @ b.relative_momenta
    return state.with_amplitudes(b.momentum_apply(diag, state.amplitudes))


def _negative_index(lattice: LatticeSpec, k_index: int) -> int:
    return lattice.site_index(-lattice.coords[k_index])


@dataclass(frozen=True)
class DiagonalLadder:
    """Annihilator of the diagonal mode k at time tau, with [b, b^dagger] = L^d.

    b_k = zeta_k / (2u) + i pi_k / (2 m c_s omega u), u^2 = c_s / (4 a^2 eps omega),
    m = 2 a^2 eps / c_s^2. It annihilates the instantaneous ground state of the
    free Hamiltonian; relative to the Bunch-Davies ladder it is the Bogoliubov
    rotation with the (alpha, beta) of ``lattice_modes.bogoliubov``.
    """

    params: CosmologyParams
    lattice: LatticeSpec
    k_index: int
    tau: float

    @property
    def omega(self) -> float:
        return float(lattice_omegas(self.lattice)[self.k_index])

    @property
    def frozen_mode(self) -> bool:
        return not self.lattice.nonzero[self.k_index]

    def _coeffs(self):
        a = scale_factor(self.params, self.tau)
        eps, cs, om = self.params.epsilon, self.params.c_s, self.omega
        u = np.sqrt(cs / (4 * a * a * eps * om))
        m = 2 * a * a * eps / cs**2
        return 1.0 / (2 * u), 1j / (2 * m * cs * om * u)

    def annihilate(self, state: StateVector) -> StateVector:
        if self.frozen_mode:
            return state.with_amplitudes(np.zeros_like(state.amplitudes))
        cz, cp = self._coeffs()
        z = apply_zeta_k(state, self.k_index).amplitudes
        p = apply_pi_k(state, self.k_index).amplitudes
        return state.with_amplitudes(cz * z + cp * p)

    def create(self, state: StateVector) -> StateVector:
        if self.frozen_mode:
            return state.with_amplitudes(np.zeros_like(state.amplitudes))
        cz, cp = self._coeffs()
        kneg = _negative_index(self.lattice, self.k_index)
        z = apply_zeta_k(state, kneg).amplitudes
        p = apply_pi_k(state, kneg).amplitudes
        return state.with_amplitudes(np.conj(cz) * z + np.conj(cp) * p)

    def number(self, state: StateVector) -> StateVector:
        """N_k = b^dagger b / L^d."""
        out = self.create(self.annihilate(state))
        return out.with_amplitudes(out.amplitudes / self.lattice.length**self.lattice.d)


def diagonal_mode_ladder(params, lattice, k_index, tau) -> DiagonalLadder:
    return DiagonalLadder(params, lattice, int(k_index), float(tau))


def dense_operator(apply, basis: _Basis, cap: int = MAX_DENSE_DIM) -> np.ndarray:
    """Dense matrix of a linear map given as a function on amplitude vectors."""
    check_dimension(basis.dim, cap, "dense operator")
    cols = []
    for i in range(basis.dim):
        e = np.zeros(basis.dim, dtype=complex)
        e[i] = 1.0
        cols.append(apply(e))
    return np.array(cols).T


def translation_permutations(basis: _Basis) -> np.ndarray:
    """perm[n, i] = index of basis configuration i translated by lattice vector n."""
    lat = basis.lattice
    levels = basis.levels
    perms = np.empty((lat.volume, basis.dim), dtype=np.int64)
    for n, shift in enumerate(lat.coords):
        dest = np.array([lat.site_index(c + shift) for c in lat.coords])
        moved = np.empty_like(levels)
        moved[:, dest] = levels
        perms[n] = basis.index_of(moved)
    return perms


def translation_sectors(basis: _Basis) -> list:
    """Orthonormal bases (sparse, dim x n_q) of the lattice-momentum sectors."""
    lat = basis.lattice
    perms = translation_permutations(basis)
    reps = np.unique(perms.min(axis=0))
    out = []
    for q in lat.coords:
        chi = np.exp(-2j * np.pi * (lat.coords @ q) / lat.L_hat)
        rows = perms[:, reps].ravel()
        cols = np.repeat(np.arange(reps.size)[None, :], lat.volume, axis=0).ravel()
        vals = np.repeat(chi[:, None], reps.size, axis=1).ravel()
        B = sparse.coo_matrix((vals, (rows, cols)), shape=(basis.dim, reps.size)).tocsc()
        norms = np.sqrt(np.asarray(abs(B).power(2).sum(axis=0)).ravel())
        keep = norms > 1e-9
        B = B[:, np.flatnonzero(keep)] @ sparse.diags(1.0 / norms[keep])
        out.append(B.tocsc())
    return out


def block_eigh(apply, basis: _Basis, sectors=None):
    """Eigendecomposition of a translation-invariant Hermitian map, sector by sector.

    Returns a list of (B, eigenvalues, eigenvectors in the sector basis).
    """
    sectors = translation_sectors(basis) if sectors is None else sectors
    out = []
    for B in sectors:
        if B.shape[1] == 0:
            continue
        check_dimension(B.shape[1], MAX_DENSE_DIM, "translation block")
        AB = np.array([apply(B[:, i].toarray().ravel()) for i in range(B.shape[1])]).T
        blk = np.asarray(B.conj().T @ AB)
        blk = 0.5 * (blk + blk.conj().T)
        w, U = np.linalg.eigh(blk)
        out.append((B, w, U))
    return out


_number_cache: dict = {}


def _number_projector(ladder: DiagonalLadder, basis: _Basis):
    key = (id(basis), ladder.params, ladder.lattice, ladder.k_index, ladder.tau)
    if key not in _number_cache:
        def apply(a):
            return ladder.number(StateVector(a, basis)).amplitudes
        lows = []
        for B, w, U in block_eigh(apply, basis):
            sel = U[:, np.round(w) < NUMBER_THRESHOLD]
            if sel.shape[1]:
                lows.append(np.asarray(B @ sel))
        low = np.concatenate(lows, axis=1)
        if len(_number_cache) >= NUMBER_CACHE_SIZE:
            _number_cache.pop(next(iter(_number_cache)))
        _number_cache[key] = (low, basis)
    return _number_cache[key][0]


def project_number_zero(state: StateVector, params: CosmologyParams, k_index: int, tau: float):
    """Project onto the N_k ~ 0 eigenspace, renormalise, return (state, discarded probability).

    For the frozen k = 0 mode N_0 is identically zero and the state is returned as is.
    """
    ladder = diagonal_mode_ladder(params, state.lattice, k_index, tau)
    if ladder.frozen_mode:
        return state.copy(), 0.0
    low = _number_projector(ladder, state.basis)
    kept = low @ (low.conj().T @ state.amplitudes)
    p_before = state.norm**2
    p_kept = float(np.vdot(kept, kept).real)
    if np.sqrt(p_kept) < EMPTY_NORM:
        raise EmptySectorError(f"projection onto N_k = 0 (k index {k_index}) left an empty state")
    out = state.with_amplitudes(kept / np.sqrt(p_kept))
    discarded = max(0.0, 1.0 - p_kept / p_before)
    out.discarded = state.discarded + discarded
    return out, discarded


# -- snapshots ---------------------------------------------------------------------

def save_snapshot(state: StateVector, path) -> None:
    """Write header + interleaved (re, im) float64 payload, plus JSON metadata.

    Header: 4-byte magic ``INFS``, one byte endianness (``<`` or ``>``), then
    uint32 G, V, d in that byte order. The payload is the full G**V vector.
    """
    path = Path(path)
    amps = state.full_amplitudes()
    e = "<" if sys.byteorder == "little" else ">"
    with open(path, "wb") as fh:
        fh.write(_MAGIC + e.encode())
        fh.write(struct.pack(e + "3I", state.grid.G, state.lattice.volume, state.lattice.d))
        inter = np.empty(2 * amps.size, dtype=e + "f8")
        inter[0::2] = amps.real
        inter[1::2] = amps.imag
        fh.write(inter.tobytes())
    meta = {
        "G": state.grid.G, "V": state.lattice.volume, "d": state.lattice.d,
        "n_b": state.grid.n_b, "zeta_max": state.grid.zeta_max, "cell": state.grid.cell,
        "eps_jlp": state.grid.eps_jlp, "b": state.lattice.b, "L_hat": state.lattice.L_hat,
        "frozen_zero_mode": state.basis.frozen, "layout": "site-major mixed radix, C order",
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_snapshot(path) -> StateVector:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise ConfigError(f"{path} is not a state snapshot")
    e = raw[4:5].decode()
    G, V, d = struct.unpack(e + "3I", raw[5:17])
    data = np.frombuffer(raw[17:], dtype=e + "f8")
    amps = data[0::2] + 1j * data[1::2]
    grid = FieldGridSpec(meta["zeta_max"], meta["n_b"], meta["cell"], meta["eps_jlp"])
    lattice = LatticeSpec(meta["b"], meta["L_hat"], d)
    if grid.G != G or lattice.volume != V:
        raise ConfigError("snapshot header disagrees with its metadata")
    full = StateVector(amps, FullBasis(grid, lattice))
    if meta.get("frozen_zero_mode"):
        sector = FrozenSector(grid, lattice)
        return StateVector(sector.restrict(amps), sector)
    return full

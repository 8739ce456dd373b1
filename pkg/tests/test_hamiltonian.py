import numpy as np
import pytest

from inflasim.background import CosmologyParams
from inflasim.errors import DomainError
from inflasim.hamiltonian import (HamiltonianFamily, build_hamiltonian, coefficient_table_csv, coefficients,
                                  norm_bounds)
from inflasim.lattice_modes import LatticeSpec, lattice_omegas
from inflasim.stateprep import vacuum_grid

P = CosmologyParams(H=0.005, epsilon=0.01, c_s=0.8, lambda_c=2e-8, tau0=-50.0, tau_end=-40.0)


@pytest.fixture(scope="module")
def fam4():
    lat = LatticeSpec(10.0, 4, 1)
    return HamiltonianFamily.build(P, lat, vacuum_grid(P, lat, 2))


def test_coefficient_time_dependence():
    c1, c2 = coefficients(P, 1.0, -40.0), coefficients(P, 1.0, -20.0)
    # a doubles between the two times
    assert c2.kinetic / c1.kinetic == pytest.approx(0.25)
    assert c2.cubic / c1.cubic == pytest.approx(2.0**-5)
    assert c2.gradient / c1.gradient == pytest.approx(4.0)
    assert c2.mixed / c1.mixed == pytest.approx(0.5)
    assert coefficients(P.replace(c_s=1.0), 1.0, -40.0).mixed == 0.0
    assert coefficients(P, 1.0, -40.0, s=0.0).cubic == 0.0


def test_coefficient_csv():
    text = coefficient_table_csv(P, 10.0, [-50.0])
    assert text.splitlines()[0] == "label,tau,coefficient" and len(text.splitlines()) == 5


def test_dense_terms_hermitian_and_match_actions(fam4):
    c = fam4.coefficients(-45.0)
    d = fam4.dense_terms(c)
    rng = np.random.default_rng(0)
    v = rng.normal(size=fam4.basis.dim) + 1j * rng.normal(size=fam4.basis.dim)
    for label, M in d.items():
        assert np.allclose(M, M.conj().T)
        action = getattr(fam4, f"apply_{label.lower()}")(v, c)
        assert np.allclose(M @ v, action)


def test_exponentials_match_dense(fam4):
    from scipy.linalg import expm
    c = fam4.coefficients(-45.0)
    d = fam4.dense_terms(c)
    rng = np.random.default_rng(1)
    v = rng.normal(size=fam4.basis.dim) + 1j * rng.normal(size=fam4.basis.dim)
    dt = 0.05
    assert np.allclose(fam4.exp_h1(v, c, dt), expm(-1j * dt * d["H1"]) @ v)
    assert np.allclose(fam4.exp_h2(v, c, dt), expm(-1j * dt * d["H2"]) @ v)
    exact = expm(-1j * dt * d["H3"]) @ v
    assert np.allclose(fam4.exp_h3(v, c, dt, substeps=0), exact, atol=1e-10)
    # the inner split is second order in the substep
    e4 = np.linalg.norm(fam4.exp_h3(v, c, dt, substeps=4) - exact)
    e8 = np.linalg.norm(fam4.exp_h3(v, c, dt, substeps=8) - exact)
    assert e8 < e4 / 3


def test_free_spectrum_matches_mode_sum():
    p = CosmologyParams(H=0.005, epsilon=0.01, tau0=-50.0, tau_end=-25.0)
    lat = LatticeSpec(10.0, 2, 1)
    fam, c = build_hamiltonian(p, lat, vacuum_grid(p, lat, 6), -50.0, 0.0)
    w = np.linalg.eigvalsh(fam.dense(c))
    om = lattice_omegas(lat)[lat.nonzero]
    assert w[0] == pytest.approx(np.sum(p.c_s * om / 2), rel=1e-6)


def test_kinetic_term_penalises_spread_momenta():
    # every momentum pattern other than the uniform one carries kinetic energy
    p = CosmologyParams(H=0.005, epsilon=0.01, tau0=-50.0, tau_end=-25.0)
    lat = LatticeSpec(10.0, 4, 1)
    fam = HamiltonianFamily.build(p, lat, vacuum_grid(p, lat, 4), frozen=False)
    m = fam.basis.momentum_indices
    uniform = np.all(m == m[:, :1], axis=1)
    assert np.all(fam.pi_sq[~uniform] > 0) and np.allclose(fam.pi_sq[uniform], 0)


def test_coupling_scale_domain():
    lat = LatticeSpec(10.0, 2, 1)
    with pytest.raises(DomainError):
        build_hamiltonian(P, lat, vacuum_grid(P, lat, 3), -45.0, 1.5)


def test_norm_bounds_dominate(fam4):
    c = fam4.coefficients(-45.0)
    d = fam4.dense_terms(c)
    bounds = norm_bounds(P, fam4.lattice, fam4.grid, -45.0)
    for b, label in zip(bounds, ("H1", "H2", "H3")):
        assert np.linalg.norm(d[label], 2) <= b * (1 + 1e-12)

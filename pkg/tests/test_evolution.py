import math

import numpy as np
import pytest
from scipy.linalg import expm

from inflasim.background import CosmologyParams
from inflasim.errors import ConfigError, DomainError, ResourceError
from inflasim.evolution import (TrotterPlan, adiabatic_prepare, alpha_com, alpha_com_bound, dense_diagonalize,
                                gate_budgets, inflation_coefficients, interacting_ground_state,
                                lattice_error_budget, lowest_modes, picture_equivalence_check, trotter_evolve)
from inflasim.hamiltonian import Coefficients, HamiltonianFamily
from inflasim.hilbert import StateVector
from inflasim.lattice_modes import LatticeSpec
from inflasim.stateprep import prepare_vacuum, vacuum_grid

SOUND = CosmologyParams(H=0.005, epsilon=0.01, c_s=0.8, lambda_c=2e-8, tau0=-50.0, tau_end=-48.0)


@pytest.fixture(scope="module")
def sound_toy():
    lat = LatticeSpec(10.0, 4, 1)
    grid = vacuum_grid(SOUND, lat, 2)
    fam = HamiltonianFamily.build(SOUND, lat, grid)
    parts = [fam.dense(Coefficients(*e)) for e in np.eye(4)]
    return fam, parts, prepare_vacuum(SOUND, lat, grid)


def dense_reference(fam, parts, psi, t0, t1, n=4000):
    taus = np.linspace(t0, t1, n + 1)
    for a, b in zip(taus[:-1], taus[1:]):
        c = fam.coefficients(0.5 * (a + b))
        H = c.kinetic * parts[0] + c.cubic * parts[1] + c.gradient * parts[2] + c.mixed * parts[3]
        psi = expm(-1j * (b - a) * H) @ psi
    return psi


def test_plan_validation():
    assert TrotterPlan(1, 4, 0.0, 1.0).evaluation_rule == "left_endpoint"
    assert TrotterPlan(4, 4, 0.0, 1.0).evaluation_rule == "midpoint"
    for bad in (dict(order=3), dict(steps=0), dict(evaluation_rule="left_endpoint", order=2),
                dict(splitting=("H1", "H1"))):
        kw = dict(order=2, steps=4, t_start=0.0, t_end=1.0)
        kw.update(bad)
        with pytest.raises(ConfigError):
            TrotterPlan(**kw)


def test_trotter_with_mixed_term_converges(sound_toy):
    fam, parts, st = sound_toy
    ref = dense_reference(fam, parts, st.amplitudes, SOUND.tau0, SOUND.tau_end)
    errs = []
    for n in (8, 16):
        out = trotter_evolve(st, fam, inflation_coefficients(fam), TrotterPlan(2, n, SOUND.tau0, SOUND.tau_end))
        errs.append(np.linalg.norm(out.amplitudes - ref))
    assert errs[1] < errs[0] / 3


def test_zero_length_evolution_is_identity(sound_toy):
    fam, _, st = sound_toy
    out = trotter_evolve(st, fam, inflation_coefficients(fam), TrotterPlan(2, 3, -50.0, -50.0))
    assert np.array_equal(out.amplitudes, st.amplitudes)


def test_dense_diagonalize_cap():
    with pytest.raises(ResourceError):
        dense_diagonalize(np.eye(5), cap=4)
    w, U, g = dense_diagonalize(np.diag([3.0, 1.0, 2.0]).astype(complex))
    assert w[0] == 1.0 and abs(g[1]) == 1.0


def test_lanczos_agrees_with_dense(monkeypatch):
    import inflasim.evolution as ev
    p = CosmologyParams(H=0.005, epsilon=0.01, lambda_c=3e-10, tau0=-200.0, tau_end=-100.0)
    lat = LatticeSpec(10.0, 4, 1)
    fam = HamiltonianFamily.build(p, lat, vacuum_grid(p, lat, 3))
    w_dense, g_dense = interacting_ground_state(fam, p.tau0, 1.0)
    monkeypatch.setattr(ev, "DENSE_GROUND_DIM", 8)
    w_lan, g_lan = interacting_ground_state(fam, p.tau0, 1.0)
    assert w_lan[0] == pytest.approx(w_dense[0], rel=1e-10)
    assert abs(np.vdot(g_dense, g_lan)) == pytest.approx(1.0, abs=1e-8)


def test_alpha_com_on_pauli_pair():
    X = np.array([[0, 1], [1, 0]], dtype=complex)
    Z = np.array([[1, 0], [0, -1]], dtype=complex)
    # order 1: ||[X, Z]|| + ||[Z, X]|| = 2 + 2
    assert alpha_com([X, Z], 1) == pytest.approx(4.0)
    # order 2: chains [A, [B, C]] with B != C; each has norm 4
    assert alpha_com([X, Z], 2) == pytest.approx(16.0)
    assert alpha_com_bound([1.0, 1.0], 2) == pytest.approx(4 * 8)
    assert alpha_com([X, Z], 2) <= alpha_com_bound([1.0, 1.0], 2)


def test_adiabatic_free_ramp_keeps_ground_state():
    p = CosmologyParams(H=0.005, epsilon=0.01, tau0=-200.0, tau_end=-100.0)
    lat = LatticeSpec(10.0, 2, 1)
    grid = vacuum_grid(p, lat, 5, vacuum="instantaneous")
    fam = HamiltonianFamily.build(p, lat, grid)
    st = prepare_vacuum(p, lat, grid, "instantaneous")
    _, g = interacting_ground_state(fam, p.tau0, 1.0)
    res = adiabatic_prepare(st, fam, 5.0, 20, target=g, trace_every=5)
    # both limited by the G = 32 grid floor of the synthesised Gaussian
    assert res.infidelity < 1e-6 and res.discarded < 1e-8
    assert len(res.trace) == 4 and res.trace_csv().startswith("step,s,norm,energy,discarded")
    with pytest.raises(DomainError):
        adiabatic_prepare(st, fam, -1.0, 10)


def test_lowest_modes():
    assert lowest_modes(LatticeSpec(10.0, 4, 1)) == [1, 3]
    assert len(lowest_modes(LatticeSpec(10.0, 4, 2))) == 4


def test_picture_check_small(sound_toy):
    fam, parts, _ = sound_toy

    def H(t, s=1.0):
        c = fam.coefficients(t, s)
        return c.kinetic * parts[0] + c.cubic * parts[1] + c.gradient * parts[2] + c.mixed * parts[3]

    O = np.diag(fam.basis.field_values(0)).astype(complex)
    r = picture_equivalence_check(H, lambda t: H(t, 0.0), O, -50.0, -49.5, -49.0, steps=400)
    assert r["max"] < 1e-5
    with pytest.raises(DomainError):
        picture_equivalence_check(H, H, O, -49.0, -50.0, -48.0)


def test_gate_budget_domain():
    p = CosmologyParams(H=0.005, epsilon=0.01, tau0=-50.0, tau_end=-25.0)
    with pytest.raises(DomainError):
        gate_budgets(p, 4, 1e-3, 0, 10.0, 100)
    b = gate_budgets(p, 4, 1e-3, 1, 10.0, 100)
    assert b.expansion_factor == pytest.approx(0.5**1.5)
    with pytest.raises(DomainError):
        lattice_error_budget(p, 1000.0, 1.0, 0.1)

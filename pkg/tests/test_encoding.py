import math

import numpy as np
import pytest

from inflasim.background import CosmologyParams
from inflasim.encoding import (FieldGridSpec, budget_grid, encoding_complexity, gaussian_leakage, hkll_kernel,
                               jlp_field_bound, kernel_matrices, qubit_budget)
from inflasim.errors import DomainError
from inflasim.lattice_modes import LatticeSpec


def test_grid_geometry():
    g = FieldGridSpec(2.0, 3, cell=10.0)
    assert g.G == 8
    assert g.values[0] == pytest.approx(-2.0 + g.delta_zeta / 2)
    assert np.allclose(g.values, -g.values[::-1])
    assert g.delta_pi * g.delta_zeta * g.G * g.cell == pytest.approx(2 * math.pi)
    with pytest.raises(DomainError):
        FieldGridSpec(-1.0, 3)
    with pytest.raises(DomainError):
        FieldGridSpec(1.0, 3, eps_jlp=1.5)


def test_qubit_budget_and_bounds():
    assert qubit_budget(8.0, 1.0) == 3
    assert qubit_budget(8.1, 1.0) == 4
    assert jlp_field_bound(4.0, 100, 0.01) == pytest.approx(200.0)
    # union bound is additive over sites
    assert gaussian_leakage([1.0, 1.0], 3.0) == pytest.approx(2 * math.erfc(3 / math.sqrt(2)))


def test_for_variance_hits_budget():
    g = FieldGridSpec.for_variance(0.5, volume=4, n_b=4, eps_jlp=1e-3)
    assert gaussian_leakage([0.5] * 4, g.zeta_max) == pytest.approx(1e-3, rel=1e-9)


def test_budget_grid_fields():
    p = CosmologyParams(H=0.005, epsilon=0.01, tau0=-50.0, tau_end=-25.0)
    out = budget_grid(p, LatticeSpec(10.0, 8, 1))
    assert out["total_qubits"] == out["n_b"] * 8
    assert out["zeta_max"] > 0 and out["delta_zeta"] > 0


def test_kernel_identity_and_truncation():
    p = CosmologyParams(H=0.005, epsilon=0.01, tau0=-50.0, tau_end=-10.0)
    lat = LatticeSpec(10.0, 8, 1)
    Kz, Kp = kernel_matrices(p, lat, p.tau0)
    assert np.array_equal(Kz, np.eye(8)) and not Kp.any()
    full = hkll_kernel(p, lat, -45.0, [0])
    cut = hkll_kernel(p, lat, -45.0, [0], truncate=True)
    assert len(cut.support) < len(full.support)
    assert 0 <= cut.residual < 1
    with pytest.raises(DomainError):
        hkll_kernel(p, lat, -60.0, [0])


def test_kernel_vacuum_independent():
    # the kernel propagates operators, so it must not depend on the state
    p = CosmologyParams(H=0.005, epsilon=0.01, tau0=-50.0, tau_end=-10.0)
    lat = LatticeSpec(10.0, 4, 1)
    a = kernel_matrices(p, lat, -20.0)
    b = kernel_matrices(p.replace(lambda_c=1e-9), lat, -20.0)
    assert np.allclose(a[0], b[0]) and np.allclose(a[1], b[1])


def test_encoding_complexity_scaling():
    p = CosmologyParams(H=0.005, epsilon=0.01, tau0=-80.0, tau_end=-40.0)
    lat = LatticeSpec(10.0, 8, 1)
    assert encoding_complexity(p, lat) == 4
    assert encoding_complexity(p, LatticeSpec(10.0, 8, 2)) == 16

import math

import pytest

from inflasim.background import CosmologyParams, efolds, eft_hierarchy_ok, scale_factor
from inflasim.errors import DomainError


def test_scale_factor_and_efolds():
    p = CosmologyParams(H=0.5, tau0=-8.0, tau_end=-2.0)
    assert scale_factor(p, -2.0) == pytest.approx(1.0)
    assert p.a0 == pytest.approx(0.25)
    assert efolds(p) == pytest.approx(math.log(4.0))


def test_sigma_default_and_override():
    p = CosmologyParams(H=0.1, epsilon=0.02, c_s=0.5)
    assert p.Sigma == pytest.approx(0.1**2 * 0.02 / 0.25)
    assert p.Sigma_derived
    q = p.replace(c_s=1.0)
    assert q.Sigma == pytest.approx(0.1**2 * 0.02)
    r = CosmologyParams(Sigma=3.0)
    assert r.Sigma == 3.0 and not r.Sigma_derived


@pytest.mark.parametrize("kw", [dict(H=0), dict(epsilon=-1), dict(c_s=1.5), dict(c_s=0),
                                dict(tau_end=0.0), dict(tau0=-1.0, tau_end=-2.0)])
def test_rejects_bad_parameters(kw):
    with pytest.raises(DomainError):
        CosmologyParams(**kw)


def test_equal_times_allowed():
    p = CosmologyParams(tau0=-3.0, tau_end=-3.0)
    assert efolds(p) == 0.0


def test_eft_hierarchy():
    assert eft_hierarchy_ok(CosmologyParams(H=0.005, epsilon=0.01), 10.0)
    # the library default H violates H < sqrt(H eps)
    assert not eft_hierarchy_ok(CosmologyParams(), 10.0)
    assert not eft_hierarchy_ok(CosmologyParams(H=0.005, epsilon=0.01), 1.0)

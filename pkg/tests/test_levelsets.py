import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from conftest import two_level
from holdertest.adversarial import lt_distance
from holdertest.density import Domain, HolderSpec, ParameterError, from_function, make_builtin, make_bump, total_mass
from holdertest.levelsets import (ConstantsLedger, DegenerateConfiguration, NormSpec, bandwidth_bulk, bulk_r_integral,
                                  compute_cutoffs, compute_u_aux, rescale, restrict_to_box, scan_u_aux, tail_mass,
                                  tail_second_moment)


def test_norm_spec_r_and_bounds():
    assert NormSpec(1.0).r(1.0, 1) == pytest.approx(0.5)
    assert NormSpec(2.0).r(1.0, 1) == pytest.approx(4 / 3)
    for t in (0.5, 2.5):
        with pytest.raises(ParameterError):
            NormSpec(t)


def test_ledger_rejects_nonpositive():
    with pytest.raises(ParameterError):
        ConstantsLedger(c_B=0)
    with pytest.raises(ParameterError):
        ConstantsLedger(c_aux=1.5)


def test_level_set_masses_two_level():
    m = two_level()
    assert tail_mass(m, 1.0) == pytest.approx(0.1, abs=1e-12)
    assert tail_second_moment(m, 1.0) == pytest.approx(0.02, abs=1e-12)
    assert tail_mass(m, 0.0) == 0.0
    assert bulk_r_integral(m, 1.0, 0.5) == pytest.approx(0.5 * math.sqrt(1.8), abs=1e-12)


def test_tail_mass_uniform_half(uniform):
    assert tail_mass(uniform, 0.5) == 0.0


@given(u1=st.floats(0, 0.5), du=st.floats(0, 0.4))
def test_tail_mass_monotone(gaussian, u1, du):
    assert tail_mass(gaussian, u1) <= tail_mass(gaussian, u1 + du) + 1e-15


def test_u_aux_two_level_thresholds():
    m = two_level()
    assert compute_u_aux(m, 100, threshold=0.1) == pytest.approx(1.8, rel=1e-5)
    assert compute_u_aux(m, 100, threshold=0.05) == pytest.approx(0.2, rel=1e-5)


def test_u_aux_uniform_clamps_to_max(uniform):
    u, clamped = compute_u_aux(uniform, 10_000, return_flag=True)
    assert u == 1.0 and not clamped


@pytest.mark.parametrize("family,params", [("uniform_box", None), ("gaussian", None),
                                           ("pareto_smoothed", {"beta": 0.5}), ("spiky", None)])
def test_u_aux_matches_grid_scan(family, params):
    m = make_builtin(family, params)
    if not m.domain.is_box:
        m = restrict_to_box(m, 1000).model
    u = compute_u_aux(m, 1000)
    scan, step = scan_u_aux(m, 1000, points=2000)
    assert abs(u - scan) <= step * (1 + 1e-9)


def test_cutoffs_uniform_n100(uniform):
    c = compute_cutoffs(uniform, 100)
    assert c.r == pytest.approx(0.5)
    assert c.I == pytest.approx(1.0, rel=1e-10)
    assert c.L_tilde == pytest.approx(1e-4)
    assert c.rho_bulk == pytest.approx(1e-4 ** 0.2, rel=1e-10)
    assert c.rho_bulk == pytest.approx(0.1585, abs=1e-4)
    assert c.rho_r == pytest.approx(0.01)
    assert c.tail_mass == 0 and c.rho_tail == 0
    assert c.dominance == "bulk"
    assert math.isinf(c.h_tail)


def test_cutoff_invariants(gaussian):
    m = restrict_to_box(gaussian, 1000).model
    c = compute_cutoffs(m, 1000)
    assert c.u_aux <= c.u_B
    assert 0 <= c.tail_mass <= 1 and min(c.rho_bulk, c.rho_tail, c.rho_r) >= 0
    assert (c.dominance == "bulk") == (c.C_BT * c.rho_bulk >= c.rho_tail)
    assert (c.u_tilde == c.u_B / 2) == (c.dominance == "bulk")


@pytest.mark.parametrize("n", [16, 100, 10_000])
def test_rho_r_exponents(uniform, n):
    assert compute_cutoffs(uniform, n, norm=NormSpec(2.0)).rho_r == pytest.approx(n ** -0.75, rel=1e-10)
    assert compute_cutoffs(uniform, n, holder=HolderSpec(alpha=1.0, L=3.0)).rho_r == pytest.approx(1 / n, rel=1e-10)


def test_rho_bulk_exact_n_scaling(uniform):
    a, b = compute_cutoffs(uniform, 1000), compute_cutoffs(uniform, 32_000)
    assert math.log(b.rho_bulk / a.rho_bulk) / math.log(32) == pytest.approx(-0.4, abs=1e-10)


def test_gaussian_rho_bulk_sigma_exponent():
    n = 10 ** 7
    r1 = compute_cutoffs(restrict_to_box(make_builtin("gaussian", {"sigma": 1.0}), n).model, n).rho_bulk
    r2 = compute_cutoffs(restrict_to_box(make_builtin("gaussian", {"sigma": 4.0}), n).model, n).rho_bulk
    assert math.log(r2 / r1) / math.log(4) == pytest.approx(0.4, abs=0.01)


def test_bandwidth_bulk(uniform):
    for n in (100, 1000):
        c = compute_cutoffs(uniform, n)
        np.testing.assert_allclose(bandwidth_bulk(uniform, np.array([0.3, 0.7]), c), n ** -0.4, rtol=1e-10)
        c2 = compute_cutoffs(uniform, n, norm=NormSpec(2.0))
        np.testing.assert_allclose(bandwidth_bulk(uniform, np.array([0.5]), c2), n ** -0.4, rtol=1e-10)


def test_bandwidth_bulk_monotone_and_domain(gaussian):
    m = restrict_to_box(gaussian, 1000).model
    c = compute_cutoffs(m, 1000)
    h = bandwidth_bulk(m, np.array([0.0, 0.5, 1.0, 1.5]), c)
    assert np.all(np.diff(h) < 0)
    with pytest.raises(ParameterError):
        bandwidth_bulk(m, np.array([m.support[1][0] * 0.999]), c)


def test_degenerate_bulk_raises():
    zero = from_function(lambda x: np.zeros(len(x)), Domain.box([0.0], [1.0]), HolderSpec(alpha=1.0, L=1.0))
    with pytest.raises(DegenerateConfiguration):
        compute_cutoffs(zero, 100)


def test_rescale_identity_and_mass(gaussian):
    m = restrict_to_box(gaussian, 100).model
    assert rescale(m, 1.0) is m
    for lam in (0.5, 3.0):
        r = rescale(m, lam)
        assert total_mass(r) == pytest.approx(1.0, rel=1e-8)
        assert r.holder.L == pytest.approx(m.holder.L * lam ** (m.holder.alpha + 1))
    with pytest.raises(ParameterError):
        rescale(gaussian, 2.0)


def test_rescale_roundtrip(gaussian):
    m = restrict_to_box(gaussian, 100).model
    back = rescale(rescale(m, 2.5), 1 / 2.5)
    x = np.linspace(m.support[0][0], m.support[1][0], 1001)
    np.testing.assert_allclose(back(x), m(x), atol=1e-10)


def test_rescale_norm_factor():
    f = make_bump(1.0, 1)
    dom, h = Domain.box([0.0], [1.0]), HolderSpec(alpha=1.0, L=1.0)
    base = from_function(lambda x: np.ones(len(x)), dom, h, breakpoints=(0.2, 0.4, 0.6, 0.8))
    bumped = from_function(lambda x: 1 + 0.1 * f((x - 0.3) / 0.2)[:] - 0.1 * f((x - 0.7) / 0.2), dom, h,
                           breakpoints=(0.2, 0.4, 0.6, 0.8))
    for t in (1.0, 2.0):
        ratio = lt_distance(rescale(bumped, 2.0), rescale(base, 2.0), t) / lt_distance(bumped, base, t)
        assert ratio == pytest.approx(2.0 ** (1 - 1 / t), rel=1e-6)


def test_restrict_gaussian_quantile(gaussian):
    r = restrict_to_box(gaussian, 100, ConstantsLedger(c_Rd=0.5))
    assert r.lam == pytest.approx(stats.norm.ppf(1 - 0.0025), rel=1e-6)
    assert r.lam == pytest.approx(2.81, abs=0.01)
    assert total_mass(r.model) == pytest.approx(1.0, rel=1e-8)


def test_restrict_compact_support(spiky):
    r = restrict_to_box(spiky, 100)
    assert r.V == 1.0
    assert r.lam == pytest.approx(float(np.max(np.abs(spiky.support[1]))))


def test_restrict_monotone_in_c_rd(gaussian):
    lam = [restrict_to_box(gaussian, 100, ConstantsLedger(c_Rd=c)).lam for c in (0.8, 0.4, 0.2)]
    assert lam[0] <= lam[1] <= lam[2]

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import special, stats

from holdertest.density import (Domain, DomainError, HolderSpec, ParameterError, bump_profile, check_regularity,
                                from_function, from_grid, integrate_box, make_builtin, make_bump, total_mass)


def test_holder_spec_derived_constants():
    h = HolderSpec(alpha=1.5, L=2.0, c_star=0.2, delta=0.5)
    assert h.L_prime == pytest.approx(3.0)
    assert h.c_star_prime == pytest.approx(0.3)


@pytest.mark.parametrize("kw", [dict(alpha=0, L=1), dict(alpha=1, L=0), dict(alpha=1, L=1, c_star=0.5),
                                dict(alpha=1, L=1, delta=-0.1)])
def test_holder_spec_rejects_invalid(kw):
    with pytest.raises(ParameterError):
        HolderSpec(**kw)


def test_domain_box_must_be_cubic():
    with pytest.raises((ParameterError, DomainError)):
        Domain.box([0.0, 0.0], [1.0, 2.0])
    assert Domain.box([0.0, 0.0], [1.0, 1.0 + 1e-14]).is_box


def test_uniform_box_is_constant_one(uniform):
    x = np.linspace(0, 1, 11)
    np.testing.assert_array_equal(uniform(x), np.ones(11))
    assert total_mass(uniform) == pytest.approx(1.0, abs=1e-12)


def test_spiky_matches_scaled_bump():
    m = make_builtin("spiky")
    f = make_bump(1.0, 1, m.holder.c_star)
    a = f.l1 ** (-1 / 2)
    x = np.linspace(-0.4, 0.4, 9) * a
    np.testing.assert_allclose(m(x), a * f(x / a), rtol=1e-12)
    assert total_mass(m) == pytest.approx(1.0, rel=1e-8)


def test_gaussian_mass_oracle(gaussian):
    # scipy normal CDF is the oracle
    assert integrate_box(gaussian, ([-1.0], [1.0])) == pytest.approx(special.erf(1 / math.sqrt(2)), abs=1e-9)
    expected = stats.norm.cdf(2.81) - stats.norm.cdf(-2.81)
    assert integrate_box(gaussian, ([-2.81], [2.81])) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(0.995, abs=1e-3)


def test_integrate_box_examples(uniform):
    assert integrate_box(uniform, ([0.2], [0.7])) == pytest.approx(0.5, abs=1e-14)
    assert integrate_box(uniform, ([0.3], [0.3])) == 0.0


def test_integrate_box_outside_domain_raises(uniform):
    with pytest.raises(DomainError):
        integrate_box(uniform, ([0.5], [1.5]))


@pytest.mark.parametrize("family,params,box", [
    ("uniform_box", None, (0.0, 1.0)),
    ("gaussian", None, (-8.0, 8.0)),
    ("pareto_smoothed", {"beta": 0.5}, (0.0, 400.0)),
    ("spiky", None, None),
])
@given(cuts=st.lists(st.floats(0.01, 0.99), min_size=1, max_size=5))
def test_integrate_box_is_additive(family, params, box, cuts):
    m = make_builtin(family, params)
    lo, hi = box if box else (float(m.support[0][0]), float(m.support[1][0]))
    edges = [lo] + sorted(lo + c * (hi - lo) for c in cuts) + [hi]
    parts = sum(integrate_box(m, ([a], [b])) for a, b in zip(edges[:-1], edges[1:]))
    whole = integrate_box(m, ([lo], [hi]))
    assert parts == pytest.approx(whole, rel=1e-8, abs=1e-14)


def test_integrate_box_refinement_stable(gaussian):
    a = integrate_box(gaussian, ([-1.3], [0.4]), 128)
    b = integrate_box(gaussian, ([-1.3], [0.4]), 256)
    assert abs(a - b) < 1e-6


def test_builtins_normalized():
    for fam, params in [("uniform_box", {"d": 2}), ("gaussian", {"d": 2, "sigma": 0.5}),
                        ("pareto_smoothed", {"beta": 0.5}), ("spiky", {"d": 2})]:
        m = make_builtin(fam, params)
        assert total_mass(m) == pytest.approx(1.0, rel=1e-6), fam


@pytest.mark.parametrize("family,params", [("gaussian", {"sigma": -1}), ("pareto_smoothed", {"beta": 1.5}),
                                           ("pareto_smoothed", {"x0": -1.0}), ("nope", None)])
def test_builtin_invalid_params(family, params):
    with pytest.raises(ParameterError):
        make_builtin(family, params)


def test_pareto_tail_monotone_and_zero_below_join(pareto):
    x1 = pareto.params["x1"]
    xs = np.linspace(x1, 1e4, 20001)
    v = pareto(xs)
    assert np.all(np.diff(v) <= 0)
    below = np.linspace(-50, pareto.params["x_minus1"], 101)
    assert np.all(pareto(below) == 0)


def test_bump_zero_outside_half_ball_bit_exact():
    f = make_bump(1.0, 2)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5000, 2))
    x = x / np.linalg.norm(x, axis=1, keepdims=True) * rng.uniform(0.5, 3, size=(5000, 1))
    assert np.all(f(x) == 0.0)
    assert bump_profile(np.array([0.25])) == 0.0
    assert f(np.zeros((1, 2)))[0] > 0


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0])
def test_bump_is_holder_with_unit_constant(alpha):
    f = make_bump(alpha, 1, 0.1)
    m = from_function(lambda x: f(x), Domain.box([-0.6], [0.6]), HolderSpec(alpha=alpha, L=1.0, c_star=0.1))
    rep = check_regularity(m, 1201)
    assert rep.holder_ok and rep.star_ok


def test_check_regularity_examples(uniform):
    rep = check_regularity(uniform, 200)
    assert rep.star_ok and rep.worst_violation == 0
    ramp = from_function(lambda x: x[:, 0], Domain.box([0.0], [1.0]), HolderSpec(alpha=1.0, L=0.5))
    assert not check_regularity(ramp, 200).holder_ok
    spiky = make_builtin("spiky")
    assert check_regularity(spiky, 2000).star_ok


def test_check_regularity_requires_two_points(uniform):
    with pytest.raises(ParameterError):
        check_regularity(uniform, 1)


def test_from_grid_roundtrip():
    x = np.linspace(0, 1, 21)
    m = from_grid(x, 1 + 0.5 * np.cos(np.pi * x), HolderSpec(alpha=1.0, L=2.0))
    assert total_mass(m) == pytest.approx(1.0, rel=1e-9)
    with pytest.raises(ParameterError):
        from_grid(x, -np.ones(21), HolderSpec(alpha=1.0, L=1.0))


def test_native_gaussian_sampler_moments(gaussian):
    x = gaussian.sample(100_000, np.random.default_rng(1))[:, 0]
    assert abs(x.mean()) <= 3 / math.sqrt(len(x))
    assert x.var() == pytest.approx(1.0, rel=0.05)

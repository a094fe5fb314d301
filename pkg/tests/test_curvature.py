import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import background
from oracles import zonal_curvatures
from qrlab.curvature import (
    ConformalMetric,
    Convention,
    EpsilonParams,
    conformal_pullback,
    d_const,
    gjms_operator,
    laplacian_g,
    metric_from_log_factor,
    mobius_map,
    paneitz_invert,
    paneitz_multipliers,
    q_from_sigma,
    r_eps_field,
    sigma_curvatures,
    traceless_ricci_sq,
    traceless_ricci_sq_from_q,
)
from qrlab.errors import InvariantViolation, PreconditionError
from qrlab.geometry import EinsteinProduct, Field, basis_function, build_background, constant, evaluate
from qrlab.rigidity import optimizer_family

F_TEXT = "0.3*mu + 0.2*mu**2 - 0.1*mu**3"

CASES = [
    (3, None, Convention.POWER_N5PLUS),
    (4, None, Convention.EXPONENTIAL4),
    (4, (2, 2), Convention.EXPONENTIAL4),
    (5, None, Convention.POWER_N5PLUS),
    (5, None, Convention.POWER_SCALAR),
    (6, (3, 3), Convention.POWER_N5PLUS),
    (7, None, Convention.POWER_SCALAR),
]


@pytest.mark.parametrize("n, product, conv", CASES)
def test_curvatures_against_symbolic_oracle(n, product, conv):
    b = background(n, 128, 48, product)
    R_ex, Q_ex, E2_ex = zonal_curvatures(n, F_TEXT, product)(b.nodes)
    mu = b.nodes
    f = 0.3 * mu + 0.2 * mu**2 - 0.1 * mu**3
    m = metric_from_log_factor(b, f, conv)
    np.testing.assert_allclose(m.R.values, R_ex, rtol=0, atol=1e-10 * np.max(np.abs(R_ex)))
    np.testing.assert_allclose(m.Q.values, Q_ex, rtol=0, atol=1e-8 * np.max(np.abs(Q_ex)))
    np.testing.assert_allclose(traceless_ricci_sq(m).values, E2_ex, rtol=0, atol=1e-10 * np.max(E2_ex))


def test_product_with_unequal_radii_against_oracle():
    r2 = math.sqrt(0.5)
    b = build_background(5, EinsteinProduct(3, 2), 128, 48)
    R_ex, Q_ex, _ = zonal_curvatures(5, F_TEXT, (3, 2), (1.0, r2))(b.nodes)
    mu = b.nodes
    m = metric_from_log_factor(b, 0.3 * mu + 0.2 * mu**2 - 0.1 * mu**3, Convention.POWER_N5PLUS)
    np.testing.assert_allclose(m.R.values, R_ex, atol=1e-10 * np.max(np.abs(R_ex)))
    np.testing.assert_allclose(m.Q.values, Q_ex, atol=1e-8 * np.max(np.abs(Q_ex)))


@pytest.mark.parametrize("n", [5, 6, 7, 8])
def test_paneitz_matches_gjms_product(n):
    b = background(n, 128, 48)
    l = slice(0, 33)
    np.testing.assert_allclose(paneitz_multipliers(b)[l], gjms_operator(b, 2).multipliers[l], rtol=1e-12)


def test_paneitz_on_s4():
    b = background(4, 64, 24)
    lam = b.eigs
    np.testing.assert_allclose(paneitz_multipliers(b), lam * (lam + 2), rtol=1e-14, atol=1e-12)


@pytest.mark.parametrize("n, product", [(5, None), (6, (3, 3))])
def test_constant_scaling(n, product):
    # g = c^{4/(n-4)} g0: R and Q scale by c^{-4/(n-4)} and c^{-8/(n-4)}
    b = background(n, 64, 24, product)
    c = 1.7
    m = ConformalMetric(b, Convention.POWER_N5PLUS, constant(b, c))
    np.testing.assert_allclose(m.R.values, b.R0 * c ** (-4 / (n - 4)), rtol=1e-13)
    np.testing.assert_allclose(m.Q.values, b.Q0 * c ** (-8 / (n - 4)), rtol=1e-13)


@pytest.mark.parametrize("n", [5, 6])
def test_optimizer_curvatures_closed_form(n):
    # a^{4/(n-4)} (1+b mu)^{-2} g0 is a rescaled Moebius pullback of the round metric
    b = background(n, 128, 48)
    a, bb = 1.3, 0.35
    m = optimizer_family(b, a, bb)
    R_ex = n * (n - 1) * (1 - bb * bb) * a ** (-4 / (n - 4))
    np.testing.assert_allclose(m.R.values, R_ex, rtol=1e-10)
    np.testing.assert_allclose(m.Q.values / m.R.values**2, d_const(n), rtol=1e-8)


def test_sphere_q_over_r_squared():
    for n in (5, 7, 9):
        b = background(n, 64, 24)
        assert b.Q0 / b.R0**2 == pytest.approx(d_const(n), rel=1e-14)
        assert b.Q0 == pytest.approx(n * (n * n - 4) / 8, rel=1e-14)


def test_mobius_pullback_composes_curvature():
    b = background(5, 128, 48)
    m = metric_from_log_factor(b, 0.2 * b.nodes**2 + 0.1 * b.nodes, Convention.POWER_N5PLUS)
    pulled = conformal_pullback(m, 0.4)
    x, _ = mobius_map(b.nodes, 0.4)
    np.testing.assert_allclose(pulled.R.values, evaluate(m.R, x), rtol=1e-9)
    np.testing.assert_allclose(pulled.Q.values, evaluate(m.Q, x), rtol=1e-7, atol=1e-7)


def test_laplacian_g_under_constant_scaling():
    b = background(6, 64, 24)
    c = 2.0
    m = ConformalMetric(b, Convention.POWER_SCALAR, constant(b, c))
    phi = basis_function(b, 3).values
    expected = c ** (-4 / (6 - 2)) * b.synth(-b.eigs * b.project(phi))
    np.testing.assert_allclose(laplacian_g(m, phi), expected, atol=1e-12)


@pytest.mark.parametrize("n", [5, 6])
def test_sigma_identities(n):
    b = background(n, 128, 48)
    m = metric_from_log_factor(b, 0.25 * b.nodes + 0.1 * b.nodes**2, Convention.POWER_N5PLUS)
    s1, s2, E2 = sigma_curvatures(m)
    np.testing.assert_allclose(s1.values, m.R.values / (2 * (n - 1)), rtol=1e-14)
    Q = q_from_sigma(m, s1.values, s2.values)
    np.testing.assert_allclose(Q, m.Q.values, atol=1e-8 * np.max(np.abs(m.Q.values)))
    np.testing.assert_allclose(traceless_ricci_sq_from_q(m), E2.values, atol=1e-7 * np.max(m.R.values) ** 2)
    _, _, E2q = sigma_curvatures(m, method="q")
    assert np.min(E2q.values) >= 0


def test_round_metric_is_einstein():
    b = background(5, 64, 24)
    m = ConformalMetric(b, Convention.POWER_N5PLUS, constant(b, 1.0))
    assert np.max(traceless_ricci_sq(m).values) < 1e-24
    s1, s2, _ = sigma_curvatures(m)
    np.testing.assert_allclose(s1.values, 2.5, rtol=1e-14)
    np.testing.assert_allclose(s2.values, 5 * 4 / 8, rtol=1e-14)


def test_positivity_is_enforced():
    b = background(5, 64, 24)
    with pytest.raises(PreconditionError):
        ConformalMetric(b, Convention.POWER_N5PLUS, Field(b, b.nodes))
    with pytest.raises(PreconditionError):
        ConformalMetric(b, Convention.EXPONENTIAL4, constant(b, 0.0))
    with pytest.raises(PreconditionError):
        ConformalMetric(b, Convention.POWER_N5PLUS, Field(b, np.full(b.N, 1e-12)))


def test_paneitz_invert_kernel_and_positivity():
    b4 = background(4, 64, 24)
    with pytest.raises(PreconditionError, match="kernel"):
        paneitz_invert(b4, constant(b4, 1.0))
    f = basis_function(b4, 2)
    out = paneitz_invert(b4, f)
    np.testing.assert_allclose(out.spectral()[2], 1 / (b4.eigs[2] * (b4.eigs[2] + 2)))
    b5 = background(5, 64, 24)
    pos = Field(b5, 1.0 + 0.5 * b5.nodes)
    assert np.min(paneitz_invert(b5, pos).values) > 0


def test_epsilon_params_range_and_r_eps():
    with pytest.raises(PreconditionError):
        EpsilonParams(5, 2 / 3)
    with pytest.raises(PreconditionError):
        EpsilonParams(4, 0.1)
    b = background(5, 64, 24)
    m = metric_from_log_factor(b, 0.2 * b.nodes, Convention.POWER_N5PLUS)
    np.testing.assert_allclose(r_eps_field(m, EpsilonParams(5, 0.0)).values, m.R.values, rtol=1e-14)
    c, eps = 1.4, 0.2
    mc = ConformalMetric(b, Convention.POWER_N5PLUS, constant(b, c))
    np.testing.assert_allclose(r_eps_field(mc, EpsilonParams(5, eps)).values,
                               (1 - eps) * b.R0 * c ** (-4 / (5 - 4)), rtol=1e-13)


def test_sigma_inconsistency_raises():
    b = background(5, 64, 24)
    m = metric_from_log_factor(b, 0.2 * b.nodes, Convention.POWER_N5PLUS)
    broken = ConformalMetric.__new__(ConformalMetric)
    object.__setattr__(broken, "bg", b)
    object.__setattr__(broken, "convention", m.convention)
    object.__setattr__(broken, "u", m.u)
    object.__setattr__(broken, "R", m.R)
    object.__setattr__(broken, "Q", Field(b, m.Q.values + 10.0))
    with pytest.raises(InvariantViolation, match="curvature inconsistency"):
        sigma_curvatures(broken)


fields = st.lists(st.floats(-0.3, 0.3, allow_nan=False), min_size=1, max_size=5)


@settings(max_examples=25, deadline=None)
@given(fields, st.floats(-0.6, 0.6))
def test_total_curvatures_moebius_invariant(coeffs, bmob):
    b = background(5, 128, 48)
    f = sum(c * b.nodes ** (k + 1) for k, c in enumerate(coeffs))
    m = metric_from_log_factor(b, f, Convention.POWER_N5PLUS)
    p = conformal_pullback(m, bmob)
    for a, c in ((m.integrate(m.R.values), p.integrate(p.R.values)),
                 (m.integrate(m.Q.values), p.integrate(p.Q.values))):
        assert c == pytest.approx(a, rel=1e-7)


@settings(max_examples=25, deadline=None)
@given(fields, st.floats(0.3, 3.0))
def test_scaling_covariance(coeffs, lam):
    # u -> lam u multiplies R by lam^{-4/(n-4)} and Q by lam^{-8/(n-4)}
    n = 6
    b = background(n, 64, 24)
    f = sum(c * b.nodes ** (k + 1) for k, c in enumerate(coeffs))
    m = metric_from_log_factor(b, f, Convention.POWER_N5PLUS)
    s = ConformalMetric(b, Convention.POWER_N5PLUS, Field(b, lam * m.u.values))
    np.testing.assert_allclose(s.R.values, lam ** (-4 / (n - 4)) * m.R.values,
                               rtol=1e-11, atol=1e-11 * np.max(np.abs(s.R.values)))
    np.testing.assert_allclose(s.Q.values, lam ** (-8 / (n - 4)) * m.Q.values,
                               rtol=1e-9, atol=1e-9 * np.max(np.abs(s.Q.values)))

from fractions import Fraction

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import background
from qrlab.curvature import Convention, traceless_ricci_sq
from qrlab.errors import PreconditionError
from qrlab.flows import relative_spread
from qrlab.functionals import random_admissible, sobolev_terms
from qrlab.geometry import Field, constant
from qrlab.rigidity import (
    QPoly,
    coefficient_certificate,
    coefficient_polys,
    convexity_check,
    convexity_margin,
    count_roots,
    e_polynomial,
    isolate_roots,
    obata_coefficients,
    obata_terms,
    optimizer_family,
)


@pytest.mark.parametrize("n", [5, 6, 9, 20])
def test_endpoint_coefficients(n):
    c1, c0 = obata_coefficients(n, 1), obata_coefficients(n, 0)
    assert c1.C == Fraction(n - 1, n - 2)
    assert c1.I == Fraction(n * (n - 1), (n - 2) ** 2)
    assert c0.C == Fraction(4 - 3 * n, n * (n - 2))
    assert c0.I == Fraction(4 * (n - 1) ** 2, n * (n - 2) ** 2)


def test_frozen_n5_coefficients():
    c1, c0 = obata_coefficients(5, 1), obata_coefficients(5, 0)
    assert (c1.C, c1.I, c0.C, c0.I) == (Fraction(4, 3), Fraction(20, 9), Fraction(-11, 15), Fraction(64, 45))


def test_float_and_exact_coefficients_agree():
    for n in (5, 8):
        exact = obata_coefficients(n, Fraction(3, 7))
        approx = obata_coefficients(n, 3 / 7)
        for name in ("B", "C", "I"):
            assert float(getattr(exact, name)) == pytest.approx(getattr(approx, name), rel=1e-14)


@pytest.mark.parametrize("n", [5, 7, 12])
def test_coefficient_identity_against_sympy(n):
    # oracle: expand I - C^2 symbolically from the defining rational expressions
    a = sp.Symbol("a")
    a1 = sp.Rational(4 * (n - 1), (n - 2) ** 2)
    a2 = sp.Rational(n * n - 4, 4 * (n - 1) * n)
    B = sp.Rational(2 * n, (n - 2) ** 2) * (sp.Rational(1, n) + a2 * (2 - a) * sp.Rational(n - 1, n)) - a1 / (2 * n)
    C = sp.Rational(n - 1, n - 2) - 2 * (1 - a) / (n - 2) * (1 + a2 * (2 - a) * (n - 1))
    I = (1 - a) * a1 * sp.Rational(n - 1, n) + 2 * a * (n - 1) * B
    diff = sp.expand(I - C**2 - (I - C**2).subs(a, 1))
    E = sum(sp.Rational(c.numerator, c.denominator) * a**k for k, c in enumerate(e_polynomial(n).c))
    assert sp.expand(diff - (1 - a) * E / (4 * n * n * (n - 2) ** 2)) == 0
    _, Cq, Iq = coefficient_polys(n)
    assert [sp.Rational(x.numerator, x.denominator) for x in Cq.c] == sp.Poly(C, a).all_coeffs()[::-1]
    assert [sp.Rational(x.numerator, x.denominator) for x in Iq.c] == sp.Poly(I, a).all_coeffs()[::-1]


def test_certificate_small_n():
    for n in (5, 6, 11):
        rep = coefficient_certificate(n)
        assert rep.ok, rep.to_text()
        assert len(rep.windows) == 101
        assert "identity: exact" in rep.to_text()
    with pytest.raises(PreconditionError):
        coefficient_certificate(4)


def test_window_at_alpha_one_is_zero():
    rep = coefficient_certificate(5, [1])
    assert rep.windows[0].A == 0


rationals = st.fractions(min_value=-5, max_value=5, max_denominator=50)
polys = st.lists(rationals, min_size=0, max_size=6).map(QPoly)


@settings(max_examples=60, deadline=None)
@given(polys, polys, rationals)
def test_qpoly_ring_laws(p, q, x):
    assert (p * q)(x) == p(x) * q(x)
    assert (p + q)(x) == p(x) + q(x)
    assert (p - p).c == ()


@settings(max_examples=60, deadline=None)
@given(polys, polys.filter(lambda q: q.degree >= 0))
def test_qpoly_divmod_reconstructs(p, q):
    quot, rem = p.divmod(q)
    assert quot * q + rem == p
    assert rem.degree < q.degree or not rem.c


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-6, 6), min_size=1, max_size=5, unique=True), st.integers(1, 3))
def test_sturm_counts_known_roots(roots, lead):
    p = QPoly([lead])
    for r in roots:
        p = p * QPoly([-Fraction(r, 2), 1])
    assert count_roots(p, -10, 10) == len(roots)
    assert count_roots(p, 0, 10) == sum(1 for r in roots if r > 0)
    iv = isolate_roots(p)
    assert len(iv) == len(roots)
    for (lo, hi), r in zip(iv, sorted(Fraction(r, 2) for r in roots)):
        assert lo < r <= hi


def test_sturm_against_numpy_roots():
    E = e_polynomial(7)
    real = [z.real for z in np.roots([float(c) for c in E.c[::-1]]) if abs(z.imag) < 1e-9]
    assert count_roots(E, -100, 100) == len(real)
    assert count_roots(E, 0, 1) == 0


@pytest.mark.parametrize("n", [5, 6, 7])
def test_obata_terms_vanish_at_optimizers(n):
    # optimizers are Einstein with constant scalar curvature, so every term is zero
    b = background(n, 128, 48)
    for a, bb in [(1.0, 0.0), (1.0, 0.2), (0.8, 0.4)]:
        m = optimizer_family(b, a, bb, form="obata")
        for alpha in (0.3, 1.0):
            t = obata_terms(m, alpha)
            assert max(map(abs, t.lemma + t.main_lhs + (t.main_rhs,))) < 1e-10


@pytest.mark.parametrize("n", [5, 7])
def test_obata_identities_on_samples(n):
    b = background(n, 128, 48)
    rng = np.random.default_rng(11)
    for _ in range(5):
        m, _ = random_admissible(b, rng, Convention.POWER_SCALAR)
        t = obata_terms(m, float(rng.uniform(0.01, 1.0)))
        assert t.res_lemma < 1e-8 and t.res_main < 1e-8
        assert t.quad_error < 1e-10


def test_obata_nearly_degenerate_sample():
    # min R is about 1e-3 of max R, so the weights S^{-alpha} are nearly singular
    b = background(7, 128, 48)
    rng = np.random.default_rng(2)
    for _ in range(62):
        m, _ = random_admissible(b, rng, Convention.POWER_SCALAR)
        alpha = float(rng.uniform(0.01, 1.0))
    R = m.R.values
    assert np.min(R) < 3e-3 * np.max(R)
    t = obata_terms(m, alpha)
    assert t.res_main < 1e-6 and t.res_lemma < 1e-6
    assert t.quad_error < 1e-10


def test_obata_preconditions():
    b = background(5, 64, 24)
    m = optimizer_family(b, 1.0, 0.2, form="obata")
    for alpha in (0.0, 1.5):
        with pytest.raises(PreconditionError):
            obata_terms(m, alpha)
    with pytest.raises(PreconditionError):
        optimizer_family(b, 1.0, 1.0)
    with pytest.raises(PreconditionError):
        optimizer_family(background(6, 64, 24, (3, 3)), 1.0, 0.1)


def test_convexity_margin_and_preconditions():
    b = background(5, 128, 48)
    rng = np.random.default_rng(5)
    u, _ = random_admissible(b, rng, Convention.POWER_SCALAR)
    v, _ = random_admissible(b, rng, Convention.POWER_SCALAR)
    for t in (0.0, 0.3, 1.0):
        low, scale = convexity_margin(b, u.u, v.u, t)
        assert low >= -1e-9 * scale
    one = constant(b, 1.0)
    assert convexity_check(b, one, one, 0.5) == pytest.approx(b.n * (b.n - 2) / 4, rel=1e-13)
    with pytest.raises(PreconditionError):
        convexity_margin(b, one, one, 1.2)
    with pytest.raises(PreconditionError):
        convexity_margin(b, one, Field(b, b.nodes), 0.5)


@pytest.mark.parametrize("n", [5, 6, 8])
def test_optimizer_grid_invariants(n):
    # pointwise fourth-order roundoff grows with |b|; the grid stops at 0.4
    b = background(n, 128, 48)
    for a in (0.5, 0.75, 1.0, 1.5, 2.0):
        for bb in (-0.4, -0.2, 0.0, 0.2, 0.4):
            m = optimizer_family(b, a, bb)
            assert relative_spread(m.R.values) <= 1e-7
            assert relative_spread(m.Q.values) <= 1e-7
            energy, rhs = sobolev_terms(m)
            assert abs(energy - rhs) <= 1e-7 * energy
            assert np.max(traceless_ricci_sq(m).values) <= 1e-7 * np.max(m.R.values) ** 2


@pytest.mark.parametrize("n", [5, 6])
def test_optimizer_forms_are_homothetic(n):
    # both forms give (1+b mu)^{-2} g0 up to a constant factor
    b = background(n, 128, 48)
    for bb in (-0.3, 0.0, 0.5):
        ratio = optimizer_family(b, 1.0, bb).R.values / optimizer_family(b, 1.0, bb, form="obata").R.values
        assert relative_spread(ratio) <= 1e-10

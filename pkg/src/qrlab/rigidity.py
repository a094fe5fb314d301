"""Optimizers, Obata-type integral identities and the coefficient certificate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .curvature import ConformalMetric, Convention, traceless_ricci_frame, traceless_ricci_sq
from .errors import PreconditionError
from .geometry import Background, Field, conformal_laplacian, orthonormal_jacobi

# ---------------------------------------------------------------------------
# optimizers


def optimizer_family(bg: Background, a: float, b: float, form: str = "paneitz") -> ConformalMetric:
    """Round metrics a(1+b mu)^{-(n-4)/2} (form "paneitz") or a(1+b mu)^{-1} with g = u^2 g0 (form "obata")."""
    if not bg.is_round:
        raise PreconditionError("the optimizer family lives on the round sphere")
    if a <= 0:
        raise PreconditionError("amplitude a must be positive")
    if not abs(b) < 1:
        raise PreconditionError(f"|b|={abs(b)} must be < 1")
    n, mu = bg.n, bg.nodes
    if form == "paneitz":
        if n == 4:
            raise PreconditionError("no power form in dimension four")
        return ConformalMetric(bg, Convention.POWER_N5PLUS, Field(bg, a * (1 + b * mu) ** (-(n - 4) / 2)))
    if form == "obata":
        U = a / (1 + b * mu)
        return ConformalMetric(bg, Convention.POWER_SCALAR, Field(bg, U ** ((n - 2) / 2)))
    raise ValueError(f"unknown form {form!r}")


# ---------------------------------------------------------------------------
# Obata identities, written for g = U^2 g0


@dataclass(frozen=True)
class ObataTerms:
    lemma: tuple[float, ...]
    main_lhs: tuple[float, ...]
    main_rhs: float
    quad_error: float = 0.0

    @staticmethod
    def _normalized(total: float, parts: Iterable[float]) -> float:
        big = max(abs(p) for p in parts)
        return abs(total) / big if big > 0 else 0.0

    @property
    def res_lemma(self) -> float:
        return self._normalized(math.fsum(self.lemma), self.lemma)

    @property
    def res_main(self) -> float:
        parts = self.main_lhs + (self.main_rhs,)
        return self._normalized(math.fsum(self.main_lhs) - self.main_rhs, parts)


def _panel_quadrature(func, lo: float, hi: float, rtol: float = 1e-13,
                      order: int = 24, max_level: int = 30) -> tuple[np.ndarray, float]:
    """Adaptive composite Gauss-Legendre for a vector-valued integrand.

    ``func`` maps an array of points to an array of shape (k, len(points)).
    Each panel is compared against its two halves; all panels of one level
    are evaluated in a single vectorized call.  A panel whose error estimate
    stops shrinking under bisection has hit the roundoff floor of the
    integrand and is accepted as is.  Returns the integrals and the summed
    error estimate relative to the largest integral.
    """
    xg, wg = np.polynomial.legendre.leggauss(order)

    def rule(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        mid, half = (a + b) / 2, (b - a) / 2
        pts = (mid[:, None] + half[:, None] * xg).ravel()
        vals = func(pts).reshape(-1, a.size, order)
        return (vals * wg).sum(axis=2) * half

    edges = np.linspace(lo, hi, 17)
    a, b = edges[:-1], edges[1:]
    coarse = rule(a, b)
    parent_err = np.full(a.size, np.inf)
    total = np.zeros(coarse.shape[0])
    err_sum = 0.0
    scale = np.max(np.abs(coarse.sum(axis=1)))
    for level in range(max_level):
        mid = (a + b) / 2
        left, right = rule(a, mid), rule(mid, b)
        fine = left + right
        scale = max(scale, np.max(np.abs(fine.sum(axis=1))), np.max(np.abs(fine)))
        err = np.max(np.abs(fine - coarse), axis=0)
        done = err <= rtol * scale * (b - a) / (hi - lo)
        if level >= 3:
            done |= err > 0.5 * parent_err
        if level == max_level - 1:
            done[:] = True
        total += fine[:, done].sum(axis=1)
        err_sum += float(err[done].sum())
        if done.all():
            return total, err_sum / scale if scale > 0 else 0.0
        keep = ~done
        a = np.concatenate([a[keep], mid[keep]])
        b = np.concatenate([mid[keep], b[keep]])
        coarse = np.concatenate([left[:, keep], right[:, keep]], axis=1)
        parent_err = np.concatenate([err[keep], err[keep]])
    raise AssertionError("unreachable")


def obata_terms(m: ConformalMetric, alpha: float, rtol: float = 1e-13) -> ObataTerms:
    """All integrals of the lemma and of the main identity.

    The S^{-alpha} weights are nearly singular when S almost vanishes, so they
    are never projected: every resolved field (U, S, Q, |E|^2, the latitude
    eigenvalue of E) is evaluated from its expansion and the weights are
    applied pointwise under an adaptive quadrature in theta.
    """
    bg, n = m.bg, m.n
    if not 0 < alpha <= 1:
        raise PreconditionError("alpha must lie in (0, 1]")
    if np.min(m.R.values) <= 0:
        raise PreconditionError("scalar curvature must be positive for the S^{-alpha} weights")
    U_nodes = np.exp(m.log_factor())
    cU, cS, cQ = bg.project(U_nodes), bg.project(m.R.values), bg.project(m.Q.values)
    cE2 = bg.project(traceless_ricci_sq(m).values)
    cEt = bg.project(traceless_ricci_frame(m)[0] * U_nodes**-2.0)
    coeffs = np.stack([cU, cS, cQ, cE2, cEt])
    lapc = -bg.eigs * coeffs[:2]
    r2 = bg.r1**2
    mdim = bg.m
    # (1-mu^2)^a dmu = sin^{m-1} theta dtheta, rescaled to the background volume
    sine_mass = math.sqrt(math.pi) * math.gamma(mdim / 2) / math.gamma((mdim + 1) / 2)
    dens = float(np.sum(bg.weights)) / sine_mass

    c = obata_coefficients(n, alpha)
    a1 = c.alpha1

    def integrand(theta: np.ndarray) -> np.ndarray:
        x = np.cos(theta)
        P, dP = orthonormal_jacobi(x, bg.L, bg.alpha, derivatives=1)
        P, dP = P / bg.norms, dP / bg.norms
        U, S, Q, E2, Et = (P @ coeffs.T).T
        dU, dS, dQ = (dP @ coeffs[:3].T).T
        lU0, lS0 = P @ lapc[0], P @ lapc[1]
        if np.min(S) <= 0:
            raise PreconditionError("scalar curvature is not positive between the nodes")
        g = (1 - x * x) / r2 / U**2
        gUU, gSS, gUS = g * dU * dU, g * dS * dS, g * dU * dS
        lapU = (lU0 + (n - 2) * (1 - x * x) * dU * dU / (r2 * U)) / U**2
        lapS = (lS0 + (n - 2) * (1 - x * x) * dU * dS / (r2 * U)) / U**2
        E_US = gUS * Et
        Sa = S**-alpha
        dQa = dQ * Sa - alpha * Q * Sa / S * dS
        w = U**n * np.sin(theta) ** (mdim - 1) * dens
        rows = [
            (n - 2) * (1 - n) / n * lapU * lapS * Sa,
            (n - 2) * (n - 1) / n * alpha * lapU * gSS * Sa / S,
            (n - 1) * E_US * Sa,
            (n - 2) / (2 * n) * U * gSS * Sa,
            (n - 2) / n * S * Sa * gUS,
            (n - 1) * a1 / 2 * E2 * Sa * gUU / U,
            1 / (2 * n) * bg.R0 / U * (a1 * E2 * Sa + alpha * gSS * Sa / S),
            alpha * (n - 1) / 2 * gSS * Sa / S * gUU / U,
            (1 - alpha) / (2 * n) * U * gSS * Sa,
            c.B * U * E2 * S * Sa,
            c.C * E_US * Sa,
            2 * (n - 1) ** 2 / n * g * dU * dQa,
        ]
        return np.stack(rows) * w

    vals, quad_err = _panel_quadrature(integrand, 0.0, math.pi, rtol=rtol)
    t = [float(v) for v in vals]
    return ObataTerms(tuple(t[:5]), tuple(t[5:11]), t[11], quad_err)


def obata_identity_residual(m: ConformalMetric, alpha: float) -> tuple[float, float]:
    t = obata_terms(m, alpha)
    return t.res_lemma, t.res_main


# ---------------------------------------------------------------------------
# coefficients


@dataclass(frozen=True)
class ObataCoefficients:
    n: int
    alpha: Fraction | float
    alpha1: Fraction | float
    alpha2: Fraction | float
    B: Fraction | float
    C: Fraction | float
    I: Fraction | float

    @property
    def cond1_bound(self):
        """Upper bound for A^2 in the first condition."""
        return (self.n - 1) * self.alpha1 * (1 - self.alpha) / self.n

    @property
    def cond2_bound(self):
        """Upper bound for (|C| - A)^2 in the second condition."""
        return 2 * self.alpha * (self.n - 1) * self.B

    def window(self) -> tuple[float, float]:
        """Float interval of admissible A (empty if lo > hi)."""
        absC = abs(float(self.C))
        lo = max(0.0, absC - math.sqrt(max(0.0, float(self.cond2_bound))))
        hi = math.sqrt(max(0.0, float(self.cond1_bound)))
        return lo, hi


def obata_coefficients(n: int, alpha) -> ObataCoefficients:
    exact = isinstance(alpha, (Fraction, int))
    one = Fraction(1) if exact else 1.0
    al = Fraction(alpha) if exact else float(alpha)
    a1 = one * 4 * (n - 1) / (n - 2) ** 2
    a2 = one * (n * n - 4) / (4 * (n - 1) * n)
    B = one * 2 * n / (n - 2) ** 2 * (one / n + a2 * (2 - al) * (n - 1) / n) - a1 / (2 * n)
    C = one * (n - 1) / (n - 2) - 2 * (1 - al) / (n - 2) * (1 + a2 * (2 - al) * (n - 1))
    I = (1 - al) * a1 * (n - 1) / n + 2 * al * (n - 1) * B
    return ObataCoefficients(n, al, a1, a2, B, C, I)


# ---------------------------------------------------------------------------
# exact polynomials over Q, lowest degree first


class QPoly:
    __slots__ = ("c",)

    def __init__(self, coeffs: Sequence):
        c = [Fraction(x) for x in coeffs]
        while c and c[-1] == 0:
            c.pop()
        self.c = tuple(c)

    @property
    def degree(self) -> int:
        return len(self.c) - 1

    def __eq__(self, other) -> bool:
        return isinstance(other, QPoly) and self.c == other.c

    def __hash__(self):
        return hash(self.c)

    def __repr__(self) -> str:
        return f"QPoly({[str(x) for x in self.c]})"

    def __add__(self, other: "QPoly") -> "QPoly":
        k = max(len(self.c), len(other.c))
        a = self.c + (Fraction(0),) * (k - len(self.c))
        b = other.c + (Fraction(0),) * (k - len(other.c))
        return QPoly([x + y for x, y in zip(a, b)])

    def __neg__(self) -> "QPoly":
        return QPoly([-x for x in self.c])

    def __sub__(self, other: "QPoly") -> "QPoly":
        return self + (-other)

    def __mul__(self, other) -> "QPoly":
        if not isinstance(other, QPoly):
            return QPoly([x * other for x in self.c])
        if not self.c or not other.c:
            return QPoly([])
        out = [Fraction(0)] * (len(self.c) + len(other.c) - 1)
        for i, x in enumerate(self.c):
            for j, y in enumerate(other.c):
                out[i + j] += x * y
        return QPoly(out)

    __rmul__ = __mul__

    def __call__(self, x) -> Fraction:
        acc = Fraction(0)
        for coef in reversed(self.c):
            acc = acc * x + coef
        return acc

    def deriv(self) -> "QPoly":
        return QPoly([k * x for k, x in enumerate(self.c)][1:])

    def divmod(self, other: "QPoly") -> tuple["QPoly", "QPoly"]:
        if not other.c:
            raise ZeroDivisionError("polynomial division by zero")
        rem = list(self.c)
        quot = [Fraction(0)] * max(0, len(rem) - len(other.c) + 1)
        lead = other.c[-1]
        while len(rem) >= len(other.c) and rem:
            shift = len(rem) - len(other.c)
            factor = rem[-1] / lead
            quot[shift] = factor
            for i, y in enumerate(other.c):
                rem[shift + i] -= factor * y
            rem.pop()
            while rem and rem[-1] == 0:
                rem.pop()
        return QPoly(quot), QPoly(rem)


ALPHA = QPoly([0, 1])


def sturm_sequence(p: QPoly) -> list[QPoly]:
    seq = [p, p.deriv()]
    while seq[-1].c:
        _, r = seq[-2].divmod(seq[-1])
        if not r.c:
            break
        seq.append(-r)
    return seq


def sign_changes(seq: Sequence[QPoly], x) -> int:
    signs = [s for s in ((q(x) > 0) - (q(x) < 0) for q in seq) if s != 0]
    return sum(1 for a, b in zip(signs, signs[1:]) if a != b)


def count_roots(p: QPoly, lo, hi) -> int:
    """Distinct real roots in (lo, hi]."""
    seq = sturm_sequence(p)
    return sign_changes(seq, Fraction(lo)) - sign_changes(seq, Fraction(hi))


def isolate_roots(p: QPoly, width=Fraction(1, 10**6)) -> list[tuple[Fraction, Fraction]]:
    """Disjoint intervals (lo, hi], each holding exactly one real root."""
    if p.degree < 1:
        return []
    seq = sturm_sequence(p)
    bound = 1 + max(abs(x / p.c[-1]) for x in p.c[:-1])
    out, stack = [], [(-bound, bound)]
    while stack:
        lo, hi = stack.pop()
        k = sign_changes(seq, lo) - sign_changes(seq, hi)
        if k == 0:
            continue
        if k == 1 and hi - lo <= width:
            out.append((lo, hi))
            continue
        mid = (lo + hi) / 2
        stack.extend([(mid, hi), (lo, mid)])
    return sorted(out)


def e_polynomial(n: int) -> QPoly:
    return QPoly([
        4 * (n - 2) ** 2 * (3 * n - 4),
        8 * (n * n + n - 4) * (n * n + 2 * n - 4),
        -(n - 2) * (n + 2) * (5 * n * n + 8 * n - 20),
        (n * n - 4) ** 2,
    ])


def coefficient_polys(n: int) -> tuple[QPoly, QPoly, QPoly]:
    """B, C, I as polynomials in alpha."""
    a1 = Fraction(4 * (n - 1), (n - 2) ** 2)
    a2 = Fraction(n * n - 4, 4 * (n - 1) * n)
    one = QPoly([1])
    two_minus = QPoly([2, -1])
    one_minus = QPoly([1, -1])
    B = (one * Fraction(1, n) + two_minus * (a2 * Fraction(n - 1, n))) * Fraction(2 * n, (n - 2) ** 2) - one * (a1 / (2 * n))
    C = one * Fraction(n - 1, n - 2) - one_minus * Fraction(2, n - 2) * (one + two_minus * (a2 * (n - 1)))
    I = one_minus * (a1 * Fraction(n - 1, n)) + ALPHA * B * (2 * (n - 1))
    return B, C, I


@dataclass
class WindowSample:
    alpha: Fraction
    A: Fraction | None
    lo: float
    hi: float
    feasible: bool


@dataclass
class CertificateReport:
    n: int
    identity_holds: bool
    e_poly: QPoly
    roots_in_unit_interval: int
    e_at_zero: Fraction
    root_intervals: list[tuple[Fraction, Fraction]]
    windows: list[WindowSample] = field(default_factory=list)

    @property
    def e_nonnegative(self) -> bool:
        return self.roots_in_unit_interval == 0 and self.e_at_zero > 0

    @property
    def all_windows_feasible(self) -> bool:
        return all(w.feasible for w in self.windows)

    @property
    def ok(self) -> bool:
        return self.identity_holds and self.e_nonnegative and self.all_windows_feasible

    def to_text(self) -> str:
        lines = [
            f"[n={self.n}]",
            f"identity: {'exact' if self.identity_holds else 'FAILED'}",
            f"E(alpha) = {' + '.join(f'({c})*a^{k}' for k, c in enumerate(self.e_poly.c))}",
            f"E(0) = {self.e_at_zero}; real roots in (0,1]: {self.roots_in_unit_interval}",
            "root isolation: " + (", ".join(f"({float(a):.8g}, {float(b):.8g}]" for a, b in self.root_intervals) or "none"),
        ]
        bad = [w for w in self.windows if not w.feasible]
        lines.append(f"A_alpha windows: {len(self.windows) - len(bad)}/{len(self.windows)} feasible")
        for w in self.windows[:: max(1, len(self.windows) // 5)]:
            lines.append(f"  alpha={w.alpha}: A={w.A} in [{w.lo:.6g}, {w.hi:.6g}]")
        for w in bad:
            lines.append(f"  INFEASIBLE alpha={w.alpha}: [{w.lo:.6g}, {w.hi:.6g}]")
        return "\n".join(lines)


def _admissible_A(c: ObataCoefficients) -> Fraction | None:
    """A rational A meeting both conditions exactly, or None."""
    absC = abs(c.C)
    b1, b2 = c.cond1_bound, c.cond2_bound

    def ok(A: Fraction) -> bool:
        return A >= 0 and A * A <= b1 and (absC - A) ** 2 <= b2

    lo, hi = c.window()
    cands = [absC] if b2 == 0 else []
    if lo <= hi:
        for t in (0.5, 0.25, 0.75, 0.0, 1.0):
            cands.append(Fraction(lo + t * (hi - lo)).limit_denominator(10**12))
    cands.append(Fraction(0))
    for A in cands:
        if ok(A):
            return A
    return None


def default_alpha_grid(points: int = 101) -> list[Fraction]:
    """Equispaced rationals k/points, k = 1..points, covering (0, 1]."""
    return [Fraction(k, points) for k in range(1, points + 1)]


def coefficient_certificate(n: int, alpha_grid: Sequence | None = None) -> CertificateReport:
    if n < 5:
        raise PreconditionError("the certificate is stated for n >= 5")
    grid = default_alpha_grid() if alpha_grid is None else [Fraction(a) for a in alpha_grid]
    _, C, I = coefficient_polys(n)
    E = e_polynomial(n)
    I1, C1 = I(1), C(1)
    lhs = I - C * C
    rhs = QPoly([I1 - C1 * C1]) + QPoly([1, -1]) * E * Fraction(1, 4 * n * n * (n - 2) ** 2)
    report = CertificateReport(
        n=n,
        identity_holds=(lhs == rhs),
        e_poly=E,
        roots_in_unit_interval=count_roots(E, 0, 1),
        e_at_zero=E(0),
        root_intervals=isolate_roots(E),
    )
    for a in grid:
        c = obata_coefficients(n, a)
        A = _admissible_A(c)
        lo, hi = c.window()
        report.windows.append(WindowSample(a, A, lo, hi, A is not None))
    return report


# ---------------------------------------------------------------------------
# convexity of the cone {L0 u >= 0}


def convexity_margin(bg: Background, u: Field, v: Field, t: float) -> tuple[float, float]:
    """(min L0(u^t v^{1-t}), scale) where scale is the sup of a u^t v^{1-t}."""
    if not 0 <= t <= 1:
        raise PreconditionError("t must lie in [0, 1]")
    if np.min(u.values) <= 0 or np.min(v.values) <= 0:
        raise PreconditionError("u and v must be positive")
    L0 = conformal_laplacian(bg)
    a = L0.multipliers[0]
    Lu, Lv = L0.apply(u).values, L0.apply(v).values
    tol_u = 1e-9 * a * np.max(u.values)
    tol_v = 1e-9 * a * np.max(v.values)
    if np.min(Lu) < -tol_u or np.min(Lv) < -tol_v:
        raise PreconditionError("L0 u >= 0 and L0 v >= 0 are required")
    w = u.values**t * v.values ** (1 - t)
    Lw = L0.apply(Field(bg, w)).values
    return float(np.min(Lw)), float(a * np.max(w))


def convexity_check(bg: Background, u: Field, v: Field, t: float) -> float:
    return convexity_margin(bg, u, v, t)[0]

"""Energies, Yamabe-type quotients and sharp sphere constants."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .curvature import (
    ConformalMetric,
    Convention,
    EpsilonParams,
    gjms_operator,
    paneitz_invert,
    paneitz_multipliers,
    r_eps_field,
    sigma_curvatures,
)
from .errors import PreconditionError
from .geometry import Background, Field, conformal_laplacian, evaluate, sphere_area


@dataclass(frozen=True)
class ConstantsTable:
    n: int
    omega_n: float
    Y_sphere: float
    Y_sigma2_sphere: float
    Y_sigma2_over_sigma1_sphere: float
    Y42_sphere: float
    d_n: float
    QoverR_sphere: float
    c_Y42_vs_Y: float

    @property
    def R_sphere(self) -> float:
        return float(self.n * (self.n - 1))

    @property
    def Q_sphere(self) -> float:
        n = self.n
        return n * (n * n - 4) / 8


def c_y42_vs_y(n: int) -> float:
    return (n - 4) * (n + 2) / (n * (n - 2) ** (2 / (n - 2)) * (4 * (n - 1)) ** ((n - 4) / (n - 2)))


def sphere_constants(n: int) -> ConstantsTable:
    if n < 5:
        raise PreconditionError("the Y_{4,2} constants need n >= 5")
    w = sphere_area(n)
    return ConstantsTable(
        n=n,
        omega_n=w,
        Y_sphere=n * (n - 2) * w ** (2 / n) / 4,
        Y_sigma2_sphere=n * (n - 1) * w ** (4 / n) / 8,
        Y_sigma2_over_sigma1_sphere=(n * (n - 1) / 8) * w ** (2 / (n - 2)) / (n / 2) ** ((n - 4) / (n - 2)),
        Y42_sphere=(n - 4) * (n * n - 4) * n ** (2 / (n - 2)) * (n - 1) ** ((4 - n) / (n - 2))
        * w ** (2 / (n - 2)) / 16,
        d_n=(n * n - 4) / (8 * n * (n - 1) ** 2),
        QoverR_sphere=(n * n - 4) / (8 * (n - 1)),
        c_Y42_vs_Y=c_y42_vs_y(n),
    )


# ---------------------------------------------------------------------------
# factors in the different conventions


def power_factor(m: ConformalMetric, k: int) -> np.ndarray:
    """Nodal u_k with g = u_k^{4/(n-2k)} g0."""
    n = m.n
    if k == 2 and m.convention is Convention.POWER_N5PLUS:
        return m.u.values
    if k == 1 and m.convention is Convention.POWER_SCALAR:
        return m.u.values
    if m.convention is Convention.POWER_SCALAR:
        return m.u.values ** ((n - 2 * k) / (n - 2))
    if m.convention is Convention.POWER_N5PLUS:
        return m.u.values ** ((n - 2 * k) / (n - 4))
    return np.exp(0.5 * (n - 2 * k) * m.u.values)


def paneitz_energy(m: ConformalMetric) -> float:
    """int u P0 u dv0 for the factor u with g = u^{4/(n-4)} g0."""
    bg = m.bg
    if m.n == 4:
        raise PreconditionError("use dim4_functional in dimension four")
    u = power_factor(m, 2)
    c = m.u.spectral() if m.convention is Convention.POWER_N5PLUS else bg.project(u)
    return bg.integrate(u * bg.synth(paneitz_multipliers(bg) * c))


def total_q(m: ConformalMetric) -> float:
    return m.integrate(m.Q.values)


def total_scalar(m: ConformalMetric, route: str = "curvature") -> float:
    """J = int R_g dv_g, by curvature quadrature or by the Dirichlet form of W."""
    bg, n = m.bg, m.n
    if route == "curvature":
        return m.integrate(m.R.values)
    if route != "gradient":
        raise ValueError(f"unknown route {route!r}")
    W = m.w_factor()
    cw = bg.project(W)
    return (4 * (n - 1) / (n - 2)) * bg.integrate(bg.grad_sq(cw) + (n - 2) * bg.R0 / (4 * (n - 1)) * W * W)


def total_scalar_eps(m: ConformalMetric, p: EpsilonParams, route: str = "curvature") -> float:
    """J_eps = int R_g u^{-2(n-2)eps/(n-4)} dv_g."""
    bg, n = m.bg, m.n
    if m.convention is not Convention.POWER_N5PLUS:
        raise PreconditionError("J_eps is defined for the u^{4/(n-4)} convention")
    u = m.u.values
    if route == "curvature":
        return m.integrate(m.R.values * u**p.weight_power)
    if route != "gradient":
        raise ValueError(f"unknown route {route!r}")
    e = p.eps
    grad = bg.grad_sq(m.u.spectral())
    k = 4 * (n - 1) * (n - 2) / (n - 4) ** 2 * (1 - 2 * e)
    return bg.integrate(k * grad * u ** ((2 / (n - 4)) * (2 - (n - 2) * e))
                        + bg.R0 * u ** (2 * (n - 2) * (1 - e) / (n - 4)))


def total_r_eps(m: ConformalMetric, p: EpsilonParams, route: str = "curvature") -> float:
    """int R^eps u^{-2(n-2)eps/(n-4)} dv_g, equal to (1-eps) J_eps."""
    bg, n = m.bg, m.n
    u = m.u.values
    if route == "curvature":
        return m.integrate(r_eps_field(m, p).values * u**p.weight_power)
    if route != "gradient":
        raise ValueError(f"unknown route {route!r}")
    grad = bg.grad_sq(m.u.spectral())
    return bg.integrate(p.h * grad * u ** ((2 / (n - 4)) * (2 - (n - 2) * p.eps))
                        + p.d * bg.R0 * u ** (2 * (n - 2) * (1 - p.eps) / (n - 4)))


def quotient_I(m: ConformalMetric) -> float:
    n = m.n
    if n < 5:
        raise PreconditionError("the Y_{4,2} quotient needs n >= 5")
    J = total_scalar(m)
    if J <= 0:
        raise PreconditionError("outside C1 cone: total scalar curvature is not positive")
    return 0.5 * (n - 4) * total_q(m) / J ** ((n - 4) / (n - 2))


def quotient_I_eps(m: ConformalMetric, p: EpsilonParams) -> float:
    n = m.n
    J = total_scalar_eps(m, p)
    if J <= 0:
        raise PreconditionError("outside C1 cone: weighted total scalar curvature is not positive")
    return paneitz_energy(m) / J ** ((n - 4) / ((n - 2) * (1 - p.eps)))


def sobolev_constant(n: int, k: int, l: int) -> float:
    g = math.gamma
    return (g(n / 2 + k) / g(n / 2 - k)
            * (g(n / 2 + l) / g(n / 2 - l)) ** (-(n - 2 * k) / (n - 2 * l))
            * sphere_area(n) ** (2 * (k - l) / (n - 2 * l)))


def sobolev_terms(m: ConformalMetric, k: int = 2, l: int = 1) -> tuple[float, float]:
    """(int u_k L_k u_k, K (int u_l L_l u_l)^{(n-2k)/(n-2l)}) for the factors of m."""
    bg, n = m.bg, m.n
    if not bg.is_round:
        raise PreconditionError("sharp Sobolev constants are for the round sphere")
    if not 0 < l < k or 2 * k >= n:
        raise PreconditionError(f"need 0 < l < k < n/2, got k={k}, l={l}, n={n}")
    u = power_factor(m, k)
    w = power_factor(m, l)
    Lk, Ll = gjms_operator(bg, k), gjms_operator(bg, l)
    cw = bg.project(w)
    Lw = bg.synth(Ll.multipliers * cw)
    if np.min(Lw) <= 0:
        raise PreconditionError("outside admissible cone: lower-order curvature is not positive")
    cu = m.u.spectral() if (k == 2 and m.convention is Convention.POWER_N5PLUS) else bg.project(u)
    lhs = bg.integrate(u * bg.synth(Lk.multipliers * cu))
    rhs_base = bg.integrate(w * Lw)
    return lhs, sobolev_constant(n, k, l) * rhs_base ** ((n - 2 * k) / (n - 2 * l))


def sobolev_deficit(m: ConformalMetric, k: int = 2, l: int = 1) -> float:
    lhs, rhs = sobolev_terms(m, k, l)
    return lhs - rhs


def sigma_ratio_terms(m: ConformalMetric) -> tuple[float, float]:
    """(int sigma_2, Y_{sigma2/sigma1}(S^n) (int sigma_1)^{(n-4)/(n-2)}), all w.r.t. dv_g."""
    n = m.n
    s1, s2, _ = sigma_curvatures(m)
    if np.min(s1.values) <= 0:
        raise PreconditionError("outside C1 cone: sigma_1 is not positive")
    k = sphere_constants(n).Y_sigma2_over_sigma1_sphere
    return m.integrate(s2.values), k * m.integrate(s1.values) ** ((n - 4) / (n - 2))


def sigma_ratio_margin(m: ConformalMetric) -> float:
    lhs, rhs = sigma_ratio_terms(m)
    return lhs - rhs


def lp_norm(bg: Background, f: np.ndarray, p: float) -> float:
    return bg.integrate(np.abs(f) ** p) ** (1.0 / p)


def in_y4_cone(bg: Background, u: Field) -> bool:
    """u > 0 and P0 u > 0 at the nodes."""
    if np.min(u.values) <= 0:
        return False
    return bool(np.min(bg.synth(paneitz_multipliers(bg) * u.spectral())) > 0)


def duality_product(bg: Background, u: Field) -> tuple[float, float, float]:
    n = bg.n
    if n < 5:
        raise PreconditionError("duality testers need n >= 5")
    if np.min(u.values) <= 0:
        raise PreconditionError("outside Y4 cone: u is not positive")
    Pu = bg.synth(paneitz_multipliers(bg) * u.spectral())
    if np.min(Pu) <= 0:
        raise PreconditionError("outside Y4 cone: P0 u is not positive")
    E = bg.integrate(u.values * Pu)
    theta = E / lp_norm(bg, Pu, 2 * n / (n + 4)) ** 2
    ytil = E / lp_norm(bg, u.values, 2 * n / (n - 4)) ** 2
    return theta, ytil, theta * ytil


def yamabe_quotient(bg: Background, w: np.ndarray) -> float:
    n = bg.n
    cw = bg.project(w)
    num = bg.integrate(w * bg.synth(conformal_laplacian(bg).multipliers * cw))
    return num / lp_norm(bg, w, 2 * n / (n - 2)) ** 2


def y42_vs_y_gap(m: ConformalMetric) -> float:
    n = m.n
    if np.min(m.R.values) <= 0:
        raise PreconditionError("outside C1 cone: scalar curvature is not positive")
    Yw = yamabe_quotient(m.bg, power_factor(m, 1))
    return c_y42_vs_y(n) * Yw ** (n / (n - 2)) - quotient_I(m)


def _expm1_minus_x(x: np.ndarray) -> np.ndarray:
    """e^x - 1 - x without cancellation for small |x|."""
    x = np.asarray(x, dtype=float)
    out = np.expm1(x) - x
    small = np.abs(x) < 0.1
    if np.any(small):
        xs = x[small]
        term = xs * xs / 2
        acc = term.copy()
        for j in range(3, 14):
            term = term * xs / j
            acc += term
        out[small] = acc
    return out


def dim4_functional(m: ConformalMetric) -> float:
    bg = m.bg
    if m.n != 4 or m.convention is not Convention.EXPONENTIAL4:
        raise PreconditionError("F[u] is defined for n = 4 in the exponential convention")
    u = m.u.values
    c = m.u.spectral()
    V = bg.volume
    Pu = bg.synth(paneitz_multipliers(bg) * c)
    pair = bg.integrate(u * Pu)
    lin = bg.integrate(u)
    # int R_u dv_u / int R0 dv0 = 1 + 2 ubar + y, with y collecting the
    # quadratic and higher parts so the linear terms cancel analytically
    y = (6.0 * bg.integrate(bg.grad_sq(c) * np.exp(2 * u)) + bg.R0 * bg.integrate(_expm1_minus_x(2 * u))) / (bg.R0 * V)
    x = 2.0 * lin / V + y
    if x <= -1.0:
        raise PreconditionError("log argument of F is not positive")
    totalQ0 = bg.Q0 * V
    return pair + 2.0 * bg.Q0 * lin - totalQ0 * math.log1p(x)


# ---------------------------------------------------------------------------
# random admissible metrics


def gaussian_zonal_field(bg: Background, rng: np.random.Generator, degree: int = 8) -> np.ndarray:
    """Band-limited Gaussian zonal field with unit sup norm and no mean mode."""
    degree = min(degree, bg.L)
    c = np.zeros(bg.L + 1)
    ls = np.arange(1, degree + 1)
    c[1: degree + 1] = rng.standard_normal(degree) / ls
    f = bg.synth(c)
    return f / np.max(np.abs(f))


def random_admissible(
    bg: Background,
    rng: np.random.Generator,
    convention: Convention = Convention.POWER_N5PLUS,
    s_range: tuple[float, float] = (0.05, 0.5),
    degree: int = 8,
    accept=None,
    max_tries: int = 10_000,
) -> tuple[ConformalMetric, int]:
    """Rejection-sample u = exp(s * field) with R_g > 0.

    Positivity is checked on a uniform theta grid through both poles, since
    R can dip below zero between the quadrature nodes.

    ``accept`` is an optional extra predicate on the metric.  Returns the
    metric and the number of rejected draws.
    """
    rejected = 0
    dense = np.cos(np.linspace(0.0, math.pi, 4 * bg.N + 1))
    for _ in range(max_tries):
        s = rng.uniform(*s_range)
        f = gaussian_zonal_field(bg, rng, degree)
        u = s * f if convention is Convention.EXPONENTIAL4 else np.exp(s * f)
        m = ConformalMetric(bg, convention, Field(bg, u))
        if np.min(m.R.values) > 0 and np.min(evaluate(m.R, dense)) > 0 and (accept is None or accept(m)):
            return m, rejected
        rejected += 1
    raise PreconditionError(f"no admissible sample after {max_tries} draws")


def random_y4_cone(
    bg: Background,
    rng: np.random.Generator,
    s_range: tuple[float, float] = (0.05, 3.0),
    degree: int = 8,
    max_tries: int = 1000,
) -> tuple[Field, int]:
    """Sample the cone {u > 0, P0 u > 0} as u = P0^{-1} exp(s * field).

    Rejection from exp(s * field) alone almost never lands in the cone for
    n = 5, because high modes dominate P0 u.  Returns u and the rejections.
    """
    rejected = 0
    for _ in range(max_tries):
        s = rng.uniform(*s_range)
        f = Field(bg, np.exp(s * gaussian_zonal_field(bg, rng, degree)))
        u = paneitz_invert(bg, f)
        if in_y4_cone(bg, u):
            return u, rejected
        rejected += 1
    raise PreconditionError(f"no sample in the Y4 cone after {max_tries} draws")


"""Conformal transformation laws for zonal metrics.

A metric in the conformal class is stored as a positive factor together with
the convention that turns it into g.  Internally everything is routed through
the scalar-curvature factor W, defined by g = W^{4/(n-2)} g0, because the
conformal Laplacian acts linearly on it.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvariantViolation, PreconditionError
from .geometry import Background, Field, SpectralOperator, evaluate

POSITIVITY_FLOOR = 1e-14
POSITIVITY_HARD = 1e-10


class Convention(enum.Enum):
    POWER_N5PLUS = "power_n5plus"  # g = u^{4/(n-4)} g0, any n != 4 (n = 3 gives u^{-4})
    EXPONENTIAL4 = "exponential4"  # g = e^{2u} g0, n = 4
    POWER_SCALAR = "power_scalar"  # g = w^{4/(n-2)} g0


# ---------------------------------------------------------------------------
# operators


def paneitz_multipliers(bg: Background) -> np.ndarray:
    n, lam = bg.n, bg.eigs
    c1 = 4 * bg.A0_coeff - (n - 2) * bg.R0 / (2 * (n - 1))
    return lam * lam - c1 * lam + (n - 4) * bg.Q0 / 2


def paneitz_operator(bg: Background) -> SpectralOperator:
    # backgrounds are Einstein by construction, so A0 is a multiple of g0
    return SpectralOperator(bg, paneitz_multipliers(bg))


def gjms_operator(bg: Background, k: int) -> SpectralOperator:
    n = bg.n
    if not bg.is_round:
        raise PreconditionError("GJMS product formula needs the round sphere")
    if k < 1 or 2 * k >= n:
        raise PreconditionError(f"GJMS order k={k} must satisfy 1 <= k < n/2 (n={n})")
    mult = np.ones(bg.L + 1)
    for j in range(1, k + 1):
        mult = mult * (bg.eigs + (n - 2 * j) * (n + 2 * j - 2) / 4)
    return SpectralOperator(bg, mult)


def paneitz_apply(bg: Background, f: Field) -> Field:
    return paneitz_operator(bg).apply(f)


def paneitz_invert(bg: Background, f: Field) -> Field:
    op = paneitz_operator(bg)
    c = f.spectral()
    if bg.n == 4:
        scale = max(1.0, float(np.linalg.norm(c)))
        if abs(c[0]) > 1e-10 * scale:
            raise PreconditionError("kernel violation: input to the inverse must have mean zero")
        c = c.copy()
        c[0] = 0.0
    elif np.any(op.multipliers <= 0):
        raise PreconditionError("Paneitz operator is not positive definite on this background")
    out = op.solve_coeffs(c)
    vals = bg.synth(out)
    if bg.n != 4 and bg.Q0 >= 0 and bg.R0 > 0 and np.min(f.values) > 0 and np.min(vals) <= 0:
        raise InvariantViolation("maximum principle violated: preimage of a positive field is not positive")
    return Field(bg, vals, out)


def gjms_apply(bg: Background, k: int, f: Field) -> Field:
    return gjms_operator(bg, k).apply(f)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True, eq=False)
class EpsilonParams:
    """Subcritical perturbation parameters; eps = 0 is the critical problem."""

    n: int
    eps: float
    a: float = field(init=False)
    b: float = field(init=False)
    h: float = field(init=False)
    d: float = field(init=False)

    def __post_init__(self):
        n, e = self.n, float(self.eps)
        if n < 5:
            raise PreconditionError("epsilon perturbation needs n >= 5")
        if not 0.0 <= e < 2.0 / (n - 2):
            raise PreconditionError(f"eps={e} outside [0, 2/(n-2))")
        object.__setattr__(self, "eps", e)
        object.__setattr__(self, "a", 2 * (n - 2) ** 2 * e * (1 - 2 * e) / (n - 4) ** 2)
        object.__setattr__(self, "b", (n - 2) * e / (2 * (n - 1)))
        object.__setattr__(self, "h", (1 - 2 * e) * (1 - e) * 4 * (n - 1) * (n - 2) / (n - 4) ** 2)
        object.__setattr__(self, "d", 1 - e)

    @property
    def weight_power(self) -> float:
        """Exponent q in the weight u^q of the perturbed total scalar curvature."""
        return -2 * (self.n - 2) * self.eps / (self.n - 4)

    @property
    def flow_power(self) -> float:
        n = self.n
        return (n + 4) / (n - 4) - 2 * (n - 2) * self.eps / (n - 4)


def _check_positive(values: np.ndarray, what: str) -> np.ndarray:
    lo = float(np.min(values))
    if lo < POSITIVITY_HARD:
        raise PreconditionError(f"{what} must be positive at every node (min {lo:.3e})")
    return np.maximum(values, POSITIVITY_FLOOR)


@dataclass(frozen=True, eq=False)
class ConformalMetric:
    """g = (factor)^{power} g0 in one of three conventions.

    R_g and Q_g are computed on construction and stored; the object is never
    mutated afterwards.
    """

    bg: Background
    convention: Convention
    u: Field
    R: Field = field(init=False, repr=False)
    Q: Field = field(init=False, repr=False)

    def __post_init__(self):
        n = self.bg.n
        if self.u.bg is not self.bg:
            raise PreconditionError("field lives on a different background")
        if self.convention is Convention.EXPONENTIAL4 and n != 4:
            raise PreconditionError("exponential convention is only used for n = 4")
        if self.convention is Convention.POWER_N5PLUS and n == 4:
            raise PreconditionError("power convention u^{4/(n-4)} is undefined for n = 4")
        if self.convention is not Convention.EXPONENTIAL4:
            _check_positive(self.u.values, "conformal factor")
        object.__setattr__(self, "R", Field(self.bg, _scalar_curvature(self)))
        object.__setattr__(self, "Q", Field(self.bg, _q_curvature(self)))

    @property
    def n(self) -> int:
        return self.bg.n

    def log_factor(self) -> np.ndarray:
        """f with g = e^{2f} g0."""
        n, u = self.n, self.u.values
        if self.convention is Convention.EXPONENTIAL4:
            return u.copy()
        if self.convention is Convention.POWER_N5PLUS:
            return 2.0 * np.log(u) / (n - 4)
        return 2.0 * np.log(u) / (n - 2)

    def w_factor(self) -> np.ndarray:
        """W with g = W^{4/(n-2)} g0, at the nodes."""
        n, u = self.n, self.u.values
        if self.convention is Convention.POWER_SCALAR:
            return np.maximum(u, POSITIVITY_FLOOR)
        if self.convention is Convention.EXPONENTIAL4:
            return np.exp(u)
        return np.maximum(u, POSITIVITY_FLOOR) ** ((n - 2) / (n - 4))

    def volume_density(self) -> np.ndarray:
        """dv_g / dv0 at the nodes."""
        n, u = self.n, self.u.values
        if self.convention is Convention.EXPONENTIAL4:
            return np.exp(4.0 * u)
        if self.convention is Convention.POWER_N5PLUS:
            return u ** (2.0 * n / (n - 4))
        return u ** (2.0 * n / (n - 2))

    def integrate(self, values: np.ndarray) -> float:
        """Integral against dv_g."""
        return self.bg.integrate(values * self.volume_density())


def _scalar_curvature(m: ConformalMetric) -> np.ndarray:
    bg, n = m.bg, m.n
    if m.convention is Convention.EXPONENTIAL4:
        c = m.u.spectral()
        return np.exp(-2.0 * m.u.values) * (bg.R0 - 6.0 * bg.lap(c) - 6.0 * bg.grad_sq(c))
    W = m.w_factor()
    cw = bg.project(W)
    LW = bg.synth((bg.eigs + (n - 2) * bg.R0 / (4 * (n - 1))) * cw)
    return (4 * (n - 1) / (n - 2)) * W ** (-(n + 2) / (n - 2)) * LW


def _q_curvature(m: ConformalMetric) -> np.ndarray:
    bg, n = m.bg, m.n
    mult = paneitz_multipliers(bg)
    if n == 4:
        if m.convention is Convention.EXPONENTIAL4:
            u = m.u
        else:
            u = Field(bg, np.log(m.u.values))
        Pu = bg.synth(mult * u.spectral())
        return np.exp(-4.0 * u.values) * (Pu + bg.Q0)
    if m.convention is Convention.POWER_N5PLUS:
        uq, cq = m.u.values, m.u.spectral()
    else:
        uq = m.u.values ** ((n - 4) / (n - 2))
        cq = bg.project(uq)
    Pu = bg.synth(mult * cq)
    return (2.0 / (n - 4)) * uq ** (-(n + 4) / (n - 4)) * Pu


def scalar_curvature(m: ConformalMetric) -> Field:
    return m.R


def q_curvature(m: ConformalMetric) -> Field:
    return m.Q


def metric_from_log_factor(bg: Background, f: np.ndarray, convention: Convention) -> ConformalMetric:
    """Build the metric e^{2f} g0 in the requested convention."""
    n = bg.n
    if convention is Convention.EXPONENTIAL4:
        u = f
    elif convention is Convention.POWER_N5PLUS:
        u = np.exp(0.5 * (n - 4) * f)
    else:
        u = np.exp(0.5 * (n - 2) * f)
    return ConformalMetric(bg, convention, Field(bg, u))


def laplacian_g(m: ConformalMetric, phi: np.ndarray) -> np.ndarray:
    """Laplace-Beltrami operator of g applied to nodal values phi."""
    bg, n = m.bg, m.n
    W = m.w_factor()
    cw = bg.project(W)
    cp = bg.project(phi)
    inner = bg.lap(cp) + 2.0 * bg.grad_dot(cw, cp) / W
    return W ** (-4.0 / (n - 2)) * inner


def grad_sq_g(m: ConformalMetric, phi: np.ndarray) -> np.ndarray:
    return np.exp(-2.0 * m.log_factor()) * m.bg.grad_sq(m.bg.project(phi))


def traceless_ricci_frame(m: ConformalMetric) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eigenvalues of E_g in a g0-orthonormal frame.

    Returns (e_theta, e_lat, e_fiber): the value along the latitude direction,
    along the m-1 directions of the orbit sphere, and along the n-m fiber
    directions of an Einstein product.  Uses E_g = -(n-2) [Hess f - df df]_0
    for g = e^{2f} g0 with g0 Einstein.
    """
    bg, n, mdim = m.bg, m.n, m.bg.m
    W = m.w_factor()
    cw = bg.project(W)
    mu = bg.nodes
    r2 = bg.r1**2
    # f = 2/(n-2) log W; the theta-theta Hessian is assembled from the
    # Laplacian so that no bare second mu-derivative is needed
    s = 2.0 / (n - 2)
    W1 = bg.dmu(cw)
    f1 = s * W1 / W
    lap_f = s * (bg.lap(cw) / W - bg.grad_sq(cw) / W**2)
    t1 = lap_f + ((mdim - 1) * mu * f1 - (1 - mu**2) * f1**2) / r2
    t2 = -mu * f1 / r2
    t3 = np.zeros_like(mu)
    tau = t1 + (mdim - 1) * t2
    k = -(n - 2)
    return k * (t1 - tau / n), k * (t2 - tau / n), k * (t3 - tau / n)


def traceless_ricci_sq(m: ConformalMetric) -> Field:
    """|E_g|^2_g from the Hessian of the log factor."""
    bg, n = m.bg, m.n
    e1, e2, e3 = traceless_ricci_frame(m)
    frame_sq = e1**2 + (bg.m - 1) * e2**2 + (n - bg.m) * e3**2
    return Field(bg, np.exp(-4.0 * m.log_factor()) * frame_sq)


def d_const(n: int) -> float:
    return (n * n - 4) / (8 * n * (n - 1) ** 2)


def traceless_ricci_sq_from_q(m: ConformalMetric) -> np.ndarray:
    """|E|^2 solved out of the Q-curvature formula (no clamping)."""
    n = m.n
    R, Q = m.R.values, m.Q.values
    lapR = laplacian_g(m, R)
    return 0.5 * (n - 2) ** 2 * (-Q - lapR / (2 * (n - 1)) + d_const(n) * R * R)


def sigma_curvatures(m: ConformalMetric, method: str = "hessian") -> tuple[Field, Field, Field]:
    """(sigma_1, sigma_2, |E|^2) of the Schouten tensor of g.

    ``method="hessian"`` takes |E|^2 from the log-factor Hessian and uses the
    Q-formula only as a consistency check; ``method="q"`` returns the value
    solved out of the Q-formula, clamped at zero inside the noise band.
    """
    bg, n = m.bg, m.n
    R = m.R.values
    scale = max(1.0, float(np.max(np.abs(R))) ** 2)
    E2q = traceless_ricci_sq_from_q(m)
    lo = float(np.min(E2q))
    if lo < -1e-6 * scale:
        raise InvariantViolation(f"curvature inconsistency: |E|^2 = {lo:.3e} < 0")
    if method == "q":
        E2 = np.where((E2q < 0) & (E2q >= -1e-8 * scale), 0.0, E2q)
    elif method == "hessian":
        E2 = traceless_ricci_sq(m).values
    else:
        raise ValueError(f"unknown method {method!r}")
    s1 = R / (2 * (n - 1))
    A2 = E2 / (n - 2) ** 2 + s1 * s1 / n
    s2 = 0.5 * (s1 * s1 - A2)
    return Field(bg, s1), Field(bg, s2), Field(bg, E2)


def q_from_sigma(m: ConformalMetric, sigma1: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    """Q = -Delta_g sigma_1 + 4 sigma_2 + (n-4)/2 sigma_1^2."""
    n = m.n
    return -laplacian_g(m, sigma1) + 4 * sigma2 + 0.5 * (n - 4) * sigma1**2


# ---------------------------------------------------------------------------
# Moebius maps along the symmetry axis


def mobius_map(mu: np.ndarray, b: float) -> tuple[np.ndarray, np.ndarray]:
    """Axis dilation mu -> (mu+b)/(1+b mu) and its conformal factor psi."""
    den = 1.0 + b * mu
    return (mu + b) / den, math.sqrt(1.0 - b * b) / den


def conformal_pullback(m: ConformalMetric, b: float) -> ConformalMetric:
    if not abs(b) < 1:
        raise PreconditionError(f"Moebius parameter |b|={abs(b)} must be < 1")
    bg, n = m.bg, m.n
    if not bg.is_round:
        raise PreconditionError("Moebius pullback is defined on the round sphere only")
    if b == 0:
        return m
    x, psi = mobius_map(bg.nodes, b)
    composed = evaluate(m.u, x)
    if m.convention is Convention.EXPONENTIAL4:
        u = composed + np.log(psi)
    elif m.convention is Convention.POWER_N5PLUS:
        u = composed * psi ** (0.5 * (n - 4))
    else:
        u = composed * psi ** (0.5 * (n - 2))
    return ConformalMetric(bg, m.convention, Field(bg, u))


# ---------------------------------------------------------------------------
# subcritical curvature


def r_eps_field(m: ConformalMetric, p: EpsilonParams) -> Field:
    bg, n = m.bg, m.n
    if m.convention is not Convention.POWER_N5PLUS or n < 5:
        raise PreconditionError("R^eps needs n >= 5 and the u^{4/(n-4)} convention")
    if p.n != n:
        raise PreconditionError("epsilon parameters built for another dimension")
    u = m.u.values
    grad = bg.grad_sq(m.u.spectral())
    k = 2 * (n - 1) / (n - 2)
    s = -4.0 / (n - 4)
    vals = (1 - 2 * p.eps) * m.R.values + k * p.a * u ** (s - 2) * grad + k * p.b * bg.R0 * u**s
    return Field(bg, vals)

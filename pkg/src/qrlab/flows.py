"""Time integrators for the nonlocal Q-curvature flows and the n = 3 path.

Both flows are integrated with classical RK4 on spectral coefficients.  The
multiplier r(t) is recomputed at every stage, and after each step the
monitors are evaluated.  A violated monitor makes the driver retry with half
the step; once the step falls below ``min_dt`` the violation propagates with
the partial trace attached.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .curvature import (
    ConformalMetric,
    Convention,
    EpsilonParams,
    paneitz_multipliers,
    paneitz_operator,
    r_eps_field,
)
from .errors import InvariantViolation, PreconditionError
from .functionals import dim4_functional, quotient_I_eps, total_scalar_eps
from .geometry import Background, Field

F_TOL = 1e-10
TOTALQ_TOL_4D = 1e-8
TOTALQ_TOL_SUB = 1e-9
LOWER_BOUND_TOL = 1e-9


class Termination(enum.Enum):
    CONVERGED = "Converged"
    BUDGET_EXCEEDED = "BudgetExceeded"
    INVARIANT_VIOLATED = "InvariantViolated"


@dataclass(frozen=True)
class Monitors:
    F: float  # F[u] for n = 4, I_eps for the subcritical flow
    totalQ: float
    minR: float
    minU: float
    ut_norm: float
    weighted_scalar: float = math.nan  # subcritical only


@dataclass(frozen=True, eq=False)
class FlowState:
    t: float
    m: ConformalMetric
    r: float
    monitors: Monitors
    step: int = 0

    @property
    def u(self) -> Field:
        return self.m.u


@dataclass
class FlowTrace:
    times: list[float] = field(default_factory=list)
    samples: list[Monitors] = field(default_factory=list)
    dts: list[float] = field(default_factory=list)
    monotone: list[bool] = field(default_factory=list)
    termination: Termination | None = None
    converged_at: int | None = None
    final: FlowState | None = None
    residual: float = math.nan
    message: str = ""

    def record(self, s: FlowState, dt: float, ok: bool = True) -> None:
        self.times.append(s.t)
        self.samples.append(s.monitors)
        self.dts.append(dt)
        self.monotone.append(ok)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(m, name) for m in self.samples])

    def summary(self) -> str:
        term = self.termination.value if self.termination else "running"
        if self.termination is Termination.CONVERGED:
            term += f" at step {self.converged_at}"
        return f"{term}; {len(self.samples)} samples, residual {self.residual:.3e}"


@dataclass(frozen=True)
class FlowConfig:
    dt: float = 1e-2
    tol: float = 1e-12
    max_steps: int = 100_000
    patience: int = 10
    min_dt: float = 1e-6
    record_every: int = 1


def _rk4(rhs: Callable[[np.ndarray], np.ndarray], c: np.ndarray, dt: float) -> np.ndarray:
    k1 = rhs(c)
    k2 = rhs(c + 0.5 * dt * k1)
    k3 = rhs(c + 0.5 * dt * k2)
    k4 = rhs(c + dt * k3)
    return c + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _energy(bg: Background, c: np.ndarray) -> float:
    """int v P0 v dv0 for the coefficient vector c (orthonormal basis)."""
    return float(np.dot(c, paneitz_multipliers(bg) * c))


def _drive(state: FlowState, cfg: FlowConfig, step: Callable[[FlowState, float], FlowState],
           finish: Callable[[FlowState], float]) -> FlowTrace:
    """Shared loop: dt halving on violations, patience-based convergence."""
    trace = FlowTrace()
    trace.record(state, 0.0)
    dt, streak = cfg.dt, 0
    for k in range(cfg.max_steps + 1):
        if state.monitors.ut_norm < cfg.tol:
            streak += 1
            if streak >= cfg.patience:
                trace.termination = Termination.CONVERGED
                trace.converged_at = k - cfg.patience + 1
                break
        else:
            streak = 0
        if k == cfg.max_steps:
            trace.termination = Termination.BUDGET_EXCEEDED
            break
        while True:
            try:
                new = step(state, dt)
                break
            except InvariantViolation as exc:
                dt *= 0.5
                if dt < cfg.min_dt:
                    trace.termination = Termination.INVARIANT_VIOLATED
                    trace.final = state
                    trace.message = str(exc)
                    raise InvariantViolation(str(exc), trace) from exc
        state = new
        if state.step % cfg.record_every == 0:
            trace.record(state, dt)
    trace.final = state
    trace.residual = finish(state)
    return trace


# ---------------------------------------------------------------------------
# four-dimensional flow, g = e^{2u} g0


def _check_flow4_background(bg: Background) -> None:
    if bg.n != 4:
        raise PreconditionError("the four-dimensional flow needs n = 4")
    if bg.R0 <= 0 or bg.Q0 < 0:
        raise PreconditionError("need R0 > 0 and Q0 >= 0")
    totalQ0 = bg.Q0 * bg.volume
    if not 0 < totalQ0 < 16 * math.pi**2 * (1 - 1e-10):
        raise PreconditionError(f"total Q-curvature {totalQ0:.6g} must lie in (0, 16 pi^2)")


def _metric4(bg: Background, c: np.ndarray) -> ConformalMetric:
    return ConformalMetric(bg, Convention.EXPONENTIAL4, Field(bg, bg.synth(c), c))


def _flow4_rhs(bg: Background, c: np.ndarray) -> tuple[np.ndarray, float, ConformalMetric]:
    m = _metric4(bg, c)
    rho = np.abs(m.R.values) * np.exp(4.0 * m.u.values)
    r = bg.Q0 * bg.volume / bg.integrate(rho)
    src = bg.project(r * rho - bg.Q0)
    src[0] = 0.0  # mean zero by the choice of r
    out = paneitz_operator(bg).solve_coeffs(src) - c
    out[0] = 0.0
    return out, r, m


def _flow4_state(bg: Background, c: np.ndarray, t: float, step: int) -> FlowState:
    ut, r, m = _flow4_rhs(bg, c)
    mon = Monitors(
        F=dim4_functional(m),
        totalQ=m.integrate(m.Q.values),
        minR=float(np.min(m.R.values)),
        minU=float(np.min(m.u.values)),
        ut_norm=_energy(bg, ut),
    )
    return FlowState(t, m, r, mon, step)


def flow4_state(u0: Field) -> FlowState:
    """Initial state of the four-dimensional flow from a mean-zero factor."""
    bg = u0.bg
    _check_flow4_background(bg)
    c = u0.spectral().copy()
    scale = max(1.0, float(np.max(np.abs(c))))
    if abs(c[0]) > 1e-9 * scale * math.sqrt(bg.volume):
        raise PreconditionError("initial factor must have mean zero")
    c[0] = 0.0
    s = _flow4_state(bg, c, 0.0, 0)
    if s.monitors.minR <= 0:
        raise PreconditionError("initial metric must have positive scalar curvature")
    return s


def step_flow4(s: FlowState, dt: float) -> FlowState:
    bg = s.m.bg
    _check_flow4_background(bg)
    c = s.u.spectral()
    c_new = _rk4(lambda v: _flow4_rhs(bg, v)[0], c, dt)
    c_new[0] = 0.0
    new = _flow4_state(bg, c_new, s.t + dt, s.step + 1)
    mon, old = new.monitors, s.monitors
    if mon.minR <= 0:
        raise InvariantViolation(f"scalar curvature lost positivity at t={new.t:.6g} (min {mon.minR:.3e})")
    if mon.F > old.F + F_TOL * max(1.0, abs(old.F)):
        raise InvariantViolation(f"F increased by {mon.F - old.F:.3e} at t={new.t:.6g}")
    if abs(mon.totalQ - old.totalQ) > TOTALQ_TOL_4D * max(1.0, abs(old.totalQ)):
        raise InvariantViolation(f"total Q drifted by {mon.totalQ - old.totalQ:.3e}")
    return new


def flow4_residual(s: FlowState) -> float:
    """L2 norm of P0 u + Q0 - lambda R e^{4u}, lambda = int Q0 / int R dv_g."""
    bg, m = s.m.bg, s.m
    c = m.u.spectral()
    rho = m.R.values * np.exp(4.0 * m.u.values)
    lam = bg.Q0 * bg.volume / bg.integrate(rho)
    res = bg.synth(paneitz_multipliers(bg) * c) + bg.Q0 - lam * rho
    return math.sqrt(bg.integrate(res * res) / bg.volume)


def run_flow4(u0: Field, cfg: FlowConfig = FlowConfig()) -> FlowTrace:
    s = flow4_state(u0)
    return _drive(s, cfg, step_flow4, flow4_residual)


# ---------------------------------------------------------------------------
# subcritical flow, g = u^{4/(n-4)} g0


def _check_sub_background(bg: Background, p: EpsilonParams) -> None:
    if bg.n < 5:
        raise PreconditionError("the subcritical flow needs n >= 5")
    if p.n != bg.n:
        raise PreconditionError("epsilon parameters built for another dimension")
    if bg.R0 <= 0 or bg.Q0 < 0:
        raise PreconditionError("need R0 > 0 and Q0 >= 0")


def _metric_n(bg: Background, c: np.ndarray) -> ConformalMetric:
    return ConformalMetric(bg, Convention.POWER_N5PLUS, Field(bg, bg.synth(c), c))


def _sub_parts(m: ConformalMetric, p: EpsilonParams) -> tuple[np.ndarray, float]:
    """Source u^{flow_power} R^eps and the multiplier r."""
    bg, n = m.bg, m.n
    u = m.u.values
    Reps = r_eps_field(m, p).values
    src = u**p.flow_power * Reps
    # int Q_g dv_g = 2/(n-4) int u P0 u dv0; the denominator is int u^q R^eps dv_g
    totalQ = 2.0 / (n - 4) * _energy(bg, m.u.spectral())
    r = totalQ / bg.integrate(src * u)
    return src, r


def _sub_rhs(bg: Background, p: EpsilonParams, c: np.ndarray) -> tuple[np.ndarray, float, ConformalMetric]:
    n = bg.n
    m = _metric_n(bg, c)
    if np.min(m.R.values) <= 0:
        raise InvariantViolation("scalar curvature lost positivity inside a stage")
    src, r = _sub_parts(m, p)
    inv = paneitz_operator(bg).solve_coeffs(bg.project(src))
    ut = (n - 4) / 4.0 * (-c + (n - 4) / 2.0 * r * inv)
    return ut, r, m


def _sub_state(bg: Background, p: EpsilonParams, c: np.ndarray, t: float, step: int) -> FlowState:
    ut, r, m = _sub_rhs(bg, p, c)
    mon = Monitors(
        F=quotient_I_eps(m, p),
        totalQ=m.integrate(m.Q.values),
        minR=float(np.min(m.R.values)),
        minU=float(np.min(m.u.values)),
        ut_norm=_energy(bg, ut),
        weighted_scalar=total_scalar_eps(m, p),
    )
    return FlowState(t, m, r, mon, step)


def subcritical_state(u0: Field, p: EpsilonParams) -> FlowState:
    bg = u0.bg
    _check_sub_background(bg, p)
    if np.min(u0.values) <= 0:
        raise PreconditionError("initial factor must be positive")
    s = _sub_state(bg, p, u0.spectral().copy(), 0.0, 0)
    if s.monitors.minR <= 0:
        raise PreconditionError("initial metric must have positive scalar curvature")
    return s


def step_subcritical(s: FlowState, p: EpsilonParams, dt: float, u0: Field | None = None) -> FlowState:
    """One RK4 step; ``u0`` enables the exponential lower-bound monitor."""
    bg, n = s.m.bg, s.m.n
    _check_sub_background(bg, p)
    c_new = _rk4(lambda v: _sub_rhs(bg, p, v)[0], s.u.spectral(), dt)
    if np.min(bg.synth(c_new)) <= 0:
        raise InvariantViolation(f"conformal factor lost positivity at t={s.t + dt:.6g}")
    new = _sub_state(bg, p, c_new, s.t + dt, s.step + 1)
    mon, old = new.monitors, s.monitors
    if mon.minR <= 0:
        raise InvariantViolation(f"scalar curvature lost positivity at t={new.t:.6g}")
    if abs(mon.totalQ - old.totalQ) > TOTALQ_TOL_SUB * abs(old.totalQ):
        raise InvariantViolation(f"total Q drifted by {mon.totalQ - old.totalQ:.3e}")
    if mon.weighted_scalar < old.weighted_scalar - F_TOL * abs(old.weighted_scalar):
        raise InvariantViolation("weighted total scalar curvature decreased")
    if mon.F > old.F + F_TOL * abs(old.F):
        raise InvariantViolation(f"I_eps increased by {mon.F - old.F:.3e}")
    if u0 is not None:
        floor = math.exp(-(n - 4) * new.t / 4) * u0.values - LOWER_BOUND_TOL
        if np.any(new.u.values < floor):
            raise InvariantViolation("conformal factor fell below the exponential lower bound")
    return new


def subcritical_residual(s: FlowState, p: EpsilonParams) -> tuple[float, float]:
    """Relative L2 residual of P0 u = (n-4)/2 rbar u^{flow_power} R^eps, and rbar."""
    m = s.m
    bg, n = m.bg, m.n
    src, r = _sub_parts(m, p)
    lhs = bg.synth(paneitz_multipliers(bg) * m.u.spectral())
    res = lhs - (n - 4) / 2.0 * r * src
    return math.sqrt(bg.integrate(res * res) / bg.integrate(lhs * lhs)), r


def run_subcritical(u0: Field, p: EpsilonParams, cfg: FlowConfig = FlowConfig()) -> FlowTrace:
    if p.eps <= 0:
        raise PreconditionError("the subcritical flow needs eps > 0")
    s = subcritical_state(u0, p)
    return _drive(s, cfg, lambda st, dt: step_subcritical(st, p, dt, u0),
                  lambda st: subcritical_residual(st, p)[0])


def constant_fixed_point(bg: Background, u0: Field) -> float:
    """Constant that the subcritical flow conserves its way to: Q0 V c^2 = int Q dv_g."""
    m = _metric_n(bg, u0.spectral())
    totalQ = 2.0 / (bg.n - 4) * _energy(bg, m.u.spectral())
    return math.sqrt(totalQ / (bg.Q0 * bg.volume))


def relative_spread(values: np.ndarray) -> float:
    return float((np.max(values) - np.min(values)) / np.max(np.abs(values)))


# ---------------------------------------------------------------------------
# epsilon continuation


@dataclass(frozen=True, eq=False)
class EpsStage:
    eps: float
    u: Field | None
    r_bar: float  # r at the unit-volume representative
    I_eps: float
    y_estimate: float  # (n-4)/2 r_bar (int R dv_g)^{2/(n-2)}, tends to Y_{4,2}
    residual: float
    spread: float
    bounded: bool
    termination: Termination
    message: str = ""


def _unit_volume(m: ConformalMetric) -> ConformalMetric:
    bg, n = m.bg, m.n
    vol = m.integrate(np.ones(bg.N))
    k = (bg.volume / vol) ** ((n - 4) / (2 * n))
    c = k * m.u.spectral()
    return _metric_n(bg, c)


def _is_bounded(u: Field) -> bool:
    vals = u.values
    return bool(np.max(vals) / np.min(vals) <= 1e6 and u.bg.tail_fraction(u.spectral()) <= 1e-2)


def epsilon_continuation(u0: Field, schedule: Sequence[float], cfg: FlowConfig = FlowConfig()) -> list[EpsStage]:
    """Run the subcritical flow for each eps, warm-starting every stage.

    Stops at the first stage that does not converge; that stage is reported
    with its termination and no field.
    """
    eps = [float(e) for e in schedule]
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise PreconditionError("schedule must be strictly decreasing")
    n = u0.bg.n
    out: list[EpsStage] = []
    u = u0
    for e in eps:
        p = EpsilonParams(n, e)
        if e <= 0:
            raise PreconditionError("schedule entries must be positive")
        try:
            trace = run_subcritical(u, p, cfg)
        except (InvariantViolation, PreconditionError) as exc:
            out.append(EpsStage(e, None, math.nan, math.nan, math.nan, math.nan, math.nan, False,
                                Termination.INVARIANT_VIOLATED, str(exc)))
            break
        final = trace.final
        unit = _unit_volume(final.m)
        _, r_bar = subcritical_residual(replace(final, m=unit), p)
        J = unit.integrate(unit.R.values)
        y = (n - 4) / 2.0 * r_bar * J ** (2.0 / (n - 2))
        stage = EpsStage(e, final.u, r_bar, final.monitors.F, y, trace.residual,
                         relative_spread(final.u.values), _is_bounded(final.u), trace.termination)
        out.append(stage)
        if trace.termination is not Termination.CONVERGED or not stage.bounded:
            break
        u = final.u
    return out


def richardson_limit(eps: Sequence[float], values: Sequence[float]) -> float:
    """Polynomial extrapolation in eps to eps = 0 through all given points."""
    eps = np.asarray(eps, dtype=float)
    values = np.asarray(values, dtype=float)
    if eps.size == 1:
        return float(values[0])
    coef = np.polynomial.polynomial.polyfit(eps, values, eps.size - 1)
    return float(coef[0])


# ---------------------------------------------------------------------------
# n = 3 path continuation, g = u^{-4} g0


@dataclass(frozen=True, eq=False)
class PathPoint:
    t: float
    u: Field
    residual: float
    newton_steps: int
    min_u: float
    max_u: float
    min_R: float


@dataclass
class PathResult:
    points: list[PathPoint]
    completed: bool
    last_t: float | None
    message: str = ""


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-10
    max_iter: int = 40
    max_halvings: int = 30
    min_dt: float = 1e-4


def _path_residual(bg: Background, t: float, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Galerkin residual of P0 u + (1-t) u^{-3} + 4t u^{-4}(lap u - 2|grad u|^2/u + R0 u/8)."""
    u = bg.synth(c)
    lap = bg.lap(c)
    g2 = bg.grad_sq(c)
    vals = (1 - t) * u**-3 + 4 * t * u**-4 * (lap - 2 * g2 / u + bg.R0 * u / 8)
    return paneitz_multipliers(bg) * c + bg.project(vals, chop=False), u


def _path_jacobian(bg: Background, t: float, c: np.ndarray) -> np.ndarray:
    u = bg.synth(c)
    lap = bg.lap(c)
    d1 = bg.dmu(c)
    s = (1.0 - bg.nodes**2) / bg.r1**2
    g2 = s * d1 * d1
    # partial derivatives of the nodal nonlinearity
    du = (-3 * (1 - t) * u**-4 - 16 * t * u**-5 * (lap - 2 * g2 / u + bg.R0 * u / 8)
          + 4 * t * u**-4 * (2 * g2 / u**2 + bg.R0 / 8))
    dlap = 4 * t * u**-4
    dg = -8 * t * u**-5 * 2 * s * d1
    Blap = bg.basis * (-bg.eigs)
    inner = du[:, None] * bg.basis + dlap[:, None] * Blap + dg[:, None] * bg.dbasis
    return np.diag(paneitz_multipliers(bg)) + bg.basis.T @ (bg.weights[:, None] * inner)


def _newton(bg: Background, t: float, c0: np.ndarray, cfg: NewtonConfig) -> tuple[np.ndarray, float, int]:
    c = c0.copy()
    G, u = _path_residual(bg, t, c)
    norm = float(np.linalg.norm(G))
    for it in range(cfg.max_iter):
        if norm <= cfg.tol:
            return c, norm, it
        J = _path_jacobian(bg, t, c)
        # lstsq handles the Moebius kernel that appears at t = 1 on the sphere
        delta = np.linalg.lstsq(J, -G, rcond=1e-12)[0]
        lam = 1.0
        for _ in range(cfg.max_halvings):
            trial = c + lam * delta
            ut = bg.synth(trial)
            if np.min(ut) > 0:
                Gt, _ = _path_residual(bg, t, trial)
                nt = float(np.linalg.norm(Gt))
                if nt * nt <= (1 - 1e-4 * lam) * norm * norm or nt <= cfg.tol:
                    break
            lam *= 0.5
        else:
            raise InvariantViolation(f"Newton line search failed at t={t:.6g}")
        c, G, norm = trial, Gt, nt
    if norm <= cfg.tol:
        return c, norm, cfg.max_iter
    raise InvariantViolation(f"Newton did not converge at t={t:.6g} (residual {norm:.3e})")


def _path_point(bg: Background, t: float, c: np.ndarray, res: float, its: int) -> PathPoint:
    u = Field(bg, bg.synth(c), c)
    m = ConformalMetric(bg, Convention.POWER_N5PLUS, u)
    min_R = float(np.min(m.R.values))
    if min_R <= 0:
        raise InvariantViolation(f"scalar curvature lost positivity at t={t:.6g}")
    return PathPoint(t, u, res, its, float(np.min(u.values)), float(np.max(u.values)), min_R)


def path_constant(t: float) -> float:
    """Constant solution on the round three-sphere: c^4 = 16(1 + 2t)/15."""
    return (16 * (1 + 2 * t) / 15) ** 0.25


def newton_continuation_3d(bg: Background, t_grid: Sequence[float], cfg: NewtonConfig = NewtonConfig(),
                           u_start: Field | None = None) -> PathResult:
    """Follow the path equation from t_grid[0] to t_grid[-1].

    The first point starts from ``u_start`` (default: the constant solving the
    equation with the background's own Q0 and R0).  A failed Newton solve
    bisects the t-step down to ``cfg.min_dt``.
    """
    if bg.n != 3:
        raise PreconditionError("the path continuation needs n = 3")
    if bg.R0 <= 0 or bg.Q0 < 0:
        raise PreconditionError("need R0 > 0 and Q0 >= 0")
    ts = [float(t) for t in t_grid]
    if not ts:
        return PathResult([], True, None)
    if any(not 0 <= t <= 1 for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
        raise PreconditionError("t_grid must be increasing inside [0, 1]")
    if u_start is None:
        # -(Q0/2) c = -(1-t) c^{-3} - (t R0/2) c^{-3}
        t0 = ts[0]
        cst = ((1 - t0 + t0 * bg.R0 / 2) / (bg.Q0 / 2)) ** 0.25
        c = np.zeros(bg.L + 1)
        c[0] = cst * math.sqrt(bg.volume)
    else:
        c = u_start.spectral().copy()
    points: list[PathPoint] = []
    try:
        c, res, its = _newton(bg, ts[0], c, cfg)
        points.append(_path_point(bg, ts[0], c, res, its))
    except InvariantViolation as exc:
        return PathResult(points, False, None, str(exc))
    t_cur = ts[0]
    for target in ts[1:]:
        while t_cur < target:
            step = target - t_cur
            while True:
                t_try = min(target, t_cur + step)
                try:
                    c_new, res, its = _newton(bg, t_try, c, cfg)
                    pt = _path_point(bg, t_try, c_new, res, its)
                    break
                except InvariantViolation as exc:
                    step *= 0.5
                    if step < cfg.min_dt:
                        return PathResult(points, False, t_cur, str(exc))
            c, t_cur = c_new, t_try
            if t_cur == target:
                points.append(pt)
    return PathResult(points, True, t_cur)

import math

import numpy as np
import pytest

from conftest import background
from qrlab import flows
from qrlab.curvature import EpsilonParams
from qrlab.errors import InvariantViolation, PreconditionError
from qrlab.flows import (
    FlowConfig,
    NewtonConfig,
    Termination,
    epsilon_continuation,
    flow4_state,
    newton_continuation_3d,
    path_constant,
    relative_spread,
    richardson_limit,
    run_flow4,
    run_subcritical,
    step_flow4,
    step_subcritical,
    subcritical_residual,
    subcritical_state,
)
from qrlab.functionals import sphere_constants
from qrlab.geometry import Field, basis_function, constant


def bump(b, amp, mode, base=0.0):
    return Field(b, base + amp * basis_function(b, mode).values)


def product22():
    return background(4, 64, 24, (2, 2))


def test_flow4_zero_is_stationary():
    b = product22()
    s = flow4_state(constant(b, 0.0))
    assert s.monitors.ut_norm <= 1e-20
    assert s.r == pytest.approx(b.Q0 / b.R0, rel=1e-14)
    nxt = step_flow4(s, 1e-2)
    assert np.max(np.abs(nxt.u.values)) <= 1e-10
    trace = run_flow4(constant(b, 0.0))
    assert trace.termination is Termination.CONVERGED
    assert trace.converged_at == 0
    assert "Converged at step 0" in trace.summary()


def test_flow4_step_conserves_total_q_and_decreases_f():
    b = product22()
    s = flow4_state(bump(b, 0.1, 2))
    q0 = b.Q0 * b.volume
    assert s.monitors.totalQ == pytest.approx(q0, rel=1e-9)
    for _ in range(20):
        new = step_flow4(s, 1e-2)
        assert new.monitors.F <= s.monitors.F + 1e-10 * abs(s.monitors.F)
        assert new.monitors.totalQ == pytest.approx(q0, rel=1e-9)
        assert abs(b.integrate(new.u.values)) < 1e-9
        s = new


def test_flow4_preconditions():
    s4 = background(4, 64, 24)
    # total Q-curvature of the round four-sphere is exactly 16 pi^2
    assert s4.Q0 * s4.volume == pytest.approx(16 * math.pi**2)
    with pytest.raises(PreconditionError, match="16 pi"):
        flow4_state(constant(s4, 0.0))
    with pytest.raises(PreconditionError, match="mean zero"):
        flow4_state(constant(product22(), 0.3))
    with pytest.raises(PreconditionError):
        flow4_state(constant(background(5, 64, 24), 0.0))


def test_subcritical_constant_is_fixed_point():
    b = background(5, 64, 24)
    p = EpsilonParams(5, 0.2)
    for c in (1.0, 0.6):
        s = subcritical_state(constant(b, c), p)
        assert s.monitors.ut_norm <= 1e-20
        nxt = step_subcritical(s, p, 1e-2)
        np.testing.assert_allclose(nxt.u.values, c, rtol=1e-10)
        res, _ = subcritical_residual(s, p)
        assert res < 1e-12
    trace = run_subcritical(constant(b, 1.0), p)
    assert trace.converged_at == 0


def test_subcritical_monitors_per_step():
    b = background(5, 64, 24)
    p = EpsilonParams(5, 0.2)
    u0 = bump(b, 0.2, 1, 1.0)
    s = subcritical_state(u0, p)
    for _ in range(30):
        new = step_subcritical(s, p, 1e-2, u0)
        assert abs(new.monitors.totalQ - s.monitors.totalQ) <= 1e-10 * abs(s.monitors.totalQ)
        assert new.monitors.F <= s.monitors.F + 1e-10 * abs(s.monitors.F)
        assert new.monitors.weighted_scalar >= s.monitors.weighted_scalar * (1 - 1e-10)
        assert np.all(new.u.values >= math.exp(-new.t / 4) * u0.values - 1e-9)
        s = new


def test_subcritical_preconditions():
    b = background(5, 64, 24)
    with pytest.raises(PreconditionError):
        run_subcritical(constant(b, 1.0), EpsilonParams(5, 0.0))
    with pytest.raises(PreconditionError):
        subcritical_state(constant(b, 1.0), EpsilonParams(6, 0.1))
    with pytest.raises(PreconditionError):
        subcritical_state(Field(b, b.nodes), EpsilonParams(5, 0.1))


def _integrate(step, s, dt, T):
    for _ in range(round(T / dt)):
        s = step(s, dt)
    return s.u.spectral()


@pytest.mark.parametrize("which", ["flow4", "subcritical"])
def test_rk4_order(which):
    if which == "flow4":
        b = product22()
        s0 = flow4_state(bump(b, 0.3, 2))
        step = step_flow4
    else:
        b = background(5, 64, 24)
        p = EpsilonParams(5, 0.2)
        s0 = subcritical_state(bump(b, 0.3, 1, 1.0), p)
        step = lambda s, dt: step_subcritical(s, p, dt)  # noqa: E731
    T = 0.4
    c1, c2, c3 = (_integrate(step, s0, dt, T) for dt in (0.2, 0.1, 0.05))
    ratio = np.linalg.norm(c1 - c2) / np.linalg.norm(c2 - c3)
    assert 12 < ratio < 20


def test_invariant_violation_carries_trace(monkeypatch):
    b = background(5, 64, 24)
    p = EpsilonParams(5, 0.2)
    u0 = bump(b, 0.2, 1, 1.0)
    # a lower-bound reference far above u0 cannot be respected
    with pytest.raises(InvariantViolation, match="lower bound"):
        step_subcritical(subcritical_state(u0, p), p, 1e-2, Field(b, 10 * u0.values))

    def failing(s, p, dt, u0=None):
        raise InvariantViolation("forced")

    monkeypatch.setattr(flows, "step_subcritical", failing)
    with pytest.raises(InvariantViolation) as info:
        flows.run_subcritical(u0, p, FlowConfig(dt=1e-2, min_dt=5e-3))
    trace = info.value.trace
    assert trace.termination is Termination.INVARIANT_VIOLATED
    assert len(trace.samples) == 1 and trace.message == "forced"


def test_budget_exceeded():
    b = product22()
    trace = run_flow4(bump(b, 0.1, 2), FlowConfig(max_steps=5))
    assert trace.termination is Termination.BUDGET_EXCEEDED
    assert len(trace.samples) == 6


def test_epsilon_continuation_empty_and_schedule_checks():
    b = background(5, 64, 24)
    assert epsilon_continuation(constant(b, 1.0), []) == []
    with pytest.raises(PreconditionError):
        epsilon_continuation(constant(b, 1.0), [0.1, 0.2])


def test_epsilon_stage_on_product():
    b = background(6, 64, 24, (3, 3))
    u0 = bump(b, 0.1, 1, 1.0)
    (stage,) = epsilon_continuation(u0, [0.2])
    assert stage.termination is Termination.CONVERGED
    assert stage.residual <= 1e-5
    assert stage.spread <= 1e-5
    assert stage.bounded


def test_epsilon_stages_at_constants_match_closed_form():
    # at constants y_estimate is Y42(S^n)/(1 - eps)
    b = background(5, 64, 24)
    stages = epsilon_continuation(constant(b, 1.0), [0.3, 0.1])
    y42 = sphere_constants(5).Y42_sphere
    for st in stages:
        assert st.y_estimate == pytest.approx(y42 / (1 - st.eps), rel=1e-10)


def test_richardson_is_exact_on_polynomials():
    eps = [0.3, 0.2, 0.1]
    assert richardson_limit(eps, [2 + 3 * e - e * e for e in eps]) == pytest.approx(2.0, abs=1e-12)
    assert richardson_limit([0.1], [5.0]) == 5.0


def test_relative_spread():
    assert relative_spread(np.array([2.0, 2.0])) == 0.0
    assert relative_spread(np.array([1.0, 2.0])) == 0.5


def test_path_t0_constant():
    b = background(3, 64, 24)
    res = newton_continuation_3d(b, [0.0])
    assert res.completed and len(res.points) == 1
    u = res.points[0].u.values
    np.testing.assert_allclose(u, (16 / 15) ** 0.25, rtol=0, atol=1e-10)
    assert path_constant(0.0) == pytest.approx((16 / 15) ** 0.25, rel=1e-15)


def test_path_to_one_and_window():
    b = background(3, 64, 24)
    res = newton_continuation_3d(b, np.linspace(0, 1, 11))
    assert res.completed and res.last_t == 1.0
    for pt in res.points:
        assert pt.residual <= 1e-10
        assert 0 < pt.min_u <= pt.max_u < math.inf
        assert pt.min_u == pytest.approx(path_constant(pt.t), rel=1e-9)
    assert newton_continuation_3d(b, []).points == []


def test_path_from_perturbed_start():
    b = background(3, 64, 24)
    start = bump(b, 0.05, 2, path_constant(0.0))
    res = newton_continuation_3d(b, [0.0, 0.5], NewtonConfig(), start)
    assert res.completed
    assert res.points[-1].residual <= 1e-10


def test_path_preconditions():
    with pytest.raises(PreconditionError):
        newton_continuation_3d(background(5, 64, 24), [0.0])
    b = background(3, 64, 24)
    with pytest.raises(PreconditionError):
        newton_continuation_3d(b, [0.5, 0.2])
    with pytest.raises(PreconditionError):
        newton_continuation_3d(b, [0.0, 1.5])


def test_epsilon_schedule_extrapolates_to_y42():
    b = background(5, 64, 24)
    stages = epsilon_continuation(bump(b, 0.2, 1, 1.0), [0.3, 0.2, 0.1, 0.05])
    assert len(stages) == 4
    assert all(st.termination is Termination.CONVERGED and st.bounded for st in stages)
    y = richardson_limit([st.eps for st in stages], [st.y_estimate for st in stages])
    assert y == pytest.approx(sphere_constants(5).Y42_sphere, rel=0.02)

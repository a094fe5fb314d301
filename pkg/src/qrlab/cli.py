"""Command line experiment runner.

    qrlab <experiment> --config <path> [--out <path>] [--seed <int>]
    qrlab list

Configs are a JSON object or flat ``key=value`` lines.  Payloads are CSV
(``# schema-version=1``, header, rows) or JSON; a ``.meta.json`` sidecar
echoes the config, the code version and the grid.  Nothing time-dependent is
written, so identical config and seed give identical bytes.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .curvature import ConformalMetric, Convention, EpsilonParams
from .errors import ConfigError, InvariantViolation, PreconditionError
from .flows import (
    FlowConfig,
    FlowTrace,
    NewtonConfig,
    constant_fixed_point,
    epsilon_continuation,
    newton_continuation_3d,
    relative_spread,
    richardson_limit,
    run_flow4,
    run_subcritical,
)
from .functionals import (
    duality_product,
    random_admissible,
    random_y4_cone,
    sigma_ratio_terms,
    sobolev_terms,
    sphere_constants,
)
from .geometry import Background, EinsteinProduct, Field, RoundSphere, basis_function, build_background
from .rigidity import coefficient_certificate, convexity_margin, obata_coefficients, obata_terms

SCHEMA_VERSION = 1

EXIT_OK, EXIT_CONFIG, EXIT_PRECONDITION, EXIT_INVARIANT = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    experiment: str
    n: int | None = None
    kind: str = "round"
    N: int | None = None
    L: int | None = None
    eps: float | None = None
    schedule: list[float] | None = None
    dt: float = 1e-2
    tol: float = 1e-12
    max_steps: int = 100_000
    seed: int = 0
    samples: int | None = None
    amplitude: float | None = None
    mode: int | None = None
    t_steps: int = 10
    n_max: int | None = None
    output_path: str | None = None
    format: str = "csv"


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _coerce(key: str, value: Any) -> Any:
    kind = _FIELD_TYPES[key]
    if value is None:
        return None
    try:
        if "list" in kind:
            if isinstance(value, str):
                value = [v for v in value.replace(";", ",").split(",") if v.strip()]
            return [float(v) for v in value]
        if kind.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            if isinstance(value, bool):
                raise ValueError
            return int(value)
        if kind.startswith("float"):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {kind}") from None


def parse_config_text(text: str) -> dict[str, Any]:
    """JSON object or flat key=value lines (# comments allowed)."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("JSON config must be an object")
        return data
    data = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        data[key] = value
    return data


def make_config(experiment: str, raw: dict[str, Any], seed: int | None = None) -> ExperimentConfig:
    raw = dict(raw)
    named = raw.pop("experiment", experiment)
    if named != experiment:
        raise ConfigError(f"config is for {named!r}, not {experiment!r}")
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; try 'qrlab list'")
    unknown = sorted(set(raw) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _coerce(k, v) for k, v in raw.items()}
    defaults = EXPERIMENTS[experiment].defaults
    for k, v in defaults.items():
        if values.get(k) is None:
            values[k] = v
    if seed is not None:
        values["seed"] = seed
    cfg = ExperimentConfig(experiment=experiment, **values)
    _validate(cfg)
    return cfg


def parse_kind(kind: str) -> RoundSphere | EinsteinProduct:
    text = kind.strip().lower()
    if text in ("round", "sphere"):
        return RoundSphere()
    if text.startswith("product"):
        body = text[len("product"):].strip(":()[] ")
        parts = [p for p in body.replace(":", ",").split(",") if p.strip()]
        if len(parts) == 2:
            try:
                return EinsteinProduct(int(parts[0]), int(parts[1]))
            except ValueError:
                pass
    raise ConfigError(f"kind must be 'round' or 'product:p,q', got {kind!r}")


def _validate(cfg: ExperimentConfig) -> None:
    kind = parse_kind(cfg.kind)
    if isinstance(kind, EinsteinProduct):
        total = kind.p + kind.q
        if cfg.n is None:
            cfg.n = total
        elif cfg.n != total:
            raise ConfigError(f"n={cfg.n} does not match {cfg.kind}")
    if cfg.format not in ("csv", "json"):
        raise ConfigError("format must be csv or json")
    for name in ("N", "L", "samples", "max_steps", "t_steps"):
        v = getattr(cfg, name)
        if v is not None and v < 1:
            raise ConfigError(f"{name} must be positive")
    if cfg.N is not None and cfg.L is not None and cfg.N < 2 * cfg.L + 2:
        raise ConfigError(f"N={cfg.N} too small for L={cfg.L}")
    if not cfg.dt > 0 or not cfg.tol > 0:
        raise ConfigError("dt and tol must be positive")
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    EXPERIMENTS[cfg.experiment].check(cfg)


# ---------------------------------------------------------------------------
# payloads


@dataclass
class Payload:
    columns: list[str]
    rows: list[Sequence[Any]] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)


def _fmt(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def render_csv(p: Payload) -> str:
    lines = [f"# schema-version={SCHEMA_VERSION}", ",".join(p.columns)]
    lines += [",".join(_fmt(v) for v in row) for row in p.rows]
    return "\n".join(lines) + "\n"


def _jsonable(v: Any) -> Any:
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def render_json(p: Payload) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "columns": p.columns, "rows": _jsonable(p.rows)}
    return json.dumps(doc, indent=1) + "\n"


def metadata(cfg: ExperimentConfig, p: Payload) -> dict[str, Any]:
    return {
        "code_version": __version__,
        "config": dataclasses.asdict(cfg),
        "grid": {"N": cfg.N, "L": cfg.L, "kind": cfg.kind, "n": cfg.n},
        "summary": _jsonable(p.summary),
    }


# ---------------------------------------------------------------------------
# experiments


def workers() -> int:
    cap = os.environ.get("QRLAB_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"QRLAB_THREADS must be an integer, got {cap!r}") from None
    return n


def _map(fn: Callable, items: Sequence) -> list:
    """Order-preserving map over independent samples."""
    k = workers()
    if k == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=k) as pool:
        return list(pool.map(fn, items))


def _background(cfg: ExperimentConfig) -> Background:
    return build_background(cfg.n, parse_kind(cfg.kind), cfg.N, cfg.L)


def _flow_config(cfg: ExperimentConfig) -> FlowConfig:
    return FlowConfig(dt=cfg.dt, tol=cfg.tol, max_steps=cfg.max_steps)


def run_constants(cfg: ExperimentConfig) -> Payload:
    cols = ["n", "Q0", "R0", "Q0_over_R0", "Y", "Y_sigma2", "Y_sigma2_over_sigma1", "Y42", "c_n",
            "identity_residual"]
    p = Payload(cols)
    for n in range(cfg.n, (cfg.n_max or cfg.n) + 1):
        t = sphere_constants(n)
        ident = t.Y42_sphere - t.c_Y42_vs_Y * t.Y_sphere ** (n / (n - 2))
        p.rows.append([n, t.Q_sphere, t.R_sphere, t.QoverR_sphere, t.Y_sphere, t.Y_sigma2_sphere,
                       t.Y_sigma2_over_sigma1_sphere, t.Y42_sphere, t.c_Y42_vs_Y, ident / t.Y42_sphere])
    return p


def _draw(bg: Background, cfg: ExperimentConfig, convention: Convention, accept=None) -> list:
    rng = np.random.default_rng(cfg.seed)
    return [random_admissible(bg, rng, convention, accept=accept)[0] for _ in range(cfg.samples)]


def run_sobolev_scan(cfg: ExperimentConfig) -> Payload:
    bg = _background(cfg)
    metrics = _draw(bg, cfg, Convention.POWER_N5PLUS)

    def row(item):
        i, m = item
        lhs, rhs = sobolev_terms(m)
        s_lhs, s_rhs = sigma_ratio_terms(m)
        return [i, lhs, rhs, lhs - rhs, s_lhs, s_rhs, s_lhs - s_rhs]

    p = Payload(["index", "energy", "sobolev_rhs", "deficit", "int_sigma2", "sigma_rhs", "sigma_margin"])
    p.rows = _map(row, list(enumerate(metrics)))
    p.summary = {"min_deficit": min(r[3] for r in p.rows), "min_sigma_margin": min(r[6] for r in p.rows)}
    return p


def run_obata_check(cfg: ExperimentConfig) -> Payload:
    bg = _background(cfg)
    rng = np.random.default_rng(cfg.seed)
    items = []
    for i in range(cfg.samples):
        m, _ = random_admissible(bg, rng, Convention.POWER_SCALAR)
        items.append((i, m, float(rng.uniform(0.01, 1.0))))

    def row(item):
        i, m, alpha = item
        t = obata_terms(m, alpha)
        return [i, alpha, math.fsum(t.lemma), max(abs(x) for x in t.lemma), t.res_lemma,
                math.fsum(t.main_lhs), t.main_rhs, t.res_main, t.quad_error]

    p = Payload(["index", "alpha", "lemma_sum", "lemma_scale", "res_lemma", "main_lhs", "main_rhs",
                 "res_main", "quad_error"])
    p.rows = _map(row, items)
    p.summary = {"max_res_lemma": max(r[4] for r in p.rows), "max_res_main": max(r[7] for r in p.rows)}
    return p


def _trace_payload(trace: FlowTrace, extra: list[str]) -> Payload:
    cols = ["step", "t", "dt", "F", "totalQ", "minR", "minU", "ut_norm"] + extra
    p = Payload(cols)
    for k, (t, dt, mon) in enumerate(zip(trace.times, trace.dts, trace.samples)):
        row = [k, t, dt, mon.F, mon.totalQ, mon.minR, mon.minU, mon.ut_norm]
        row += [getattr(mon, name) for name in extra]
        p.rows.append(row)
    p.summary = {
        "termination": trace.termination.value if trace.termination else None,
        "converged_at": trace.converged_at,
        "residual": trace.residual,
        "message": trace.message,
    }
    return p


def run_flow4_experiment(cfg: ExperimentConfig) -> Payload:
    bg = _background(cfg)
    u0 = Field(bg, cfg.amplitude * basis_function(bg, cfg.mode).values)
    trace = run_flow4(u0, _flow_config(cfg))
    return _trace_payload(trace, [])


def run_subcritical_experiment(cfg: ExperimentConfig) -> Payload:
    bg = _background(cfg)
    p_eps = EpsilonParams(cfg.n, cfg.eps)
    u0 = Field(bg, 1.0 + cfg.amplitude * basis_function(bg, cfg.mode).values)
    trace = run_subcritical(u0, p_eps, _flow_config(cfg))
    p = _trace_payload(trace, ["weighted_scalar"])
    u = trace.final.u.values
    p.summary.update(spread=relative_spread(u), limit_mean=float(np.mean(u)),
                     constant_fixed_point=constant_fixed_point(bg, u0))
    return p


def run_eps_continuation(cfg: ExperimentConfig) -> Payload:
    bg = _background(cfg)
    u0 = Field(bg, 1.0 + cfg.amplitude * basis_function(bg, cfg.mode).values)
    stages = epsilon_continuation(u0, cfg.schedule, _flow_config(cfg))
    p = Payload(["eps", "termination", "r_bar", "I_eps", "y_estimate", "residual", "spread", "bounded"])
    for s in stages:
        p.rows.append([s.eps, s.termination.value, s.r_bar, s.I_eps, s.y_estimate, s.residual, s.spread,
                       s.bounded])
    good = [s for s in stages if s.u is not None]
    p.summary = {
        "stages": len(stages),
        "all_bounded": all(s.bounded for s in stages),
        "y_extrapolated": richardson_limit([s.eps for s in good], [s.y_estimate for s in good]) if good else None,
    }
    if bg.is_round and cfg.n >= 5:
        p.summary["Y42_sphere"] = sphere_constants(cfg.n).Y42_sphere
    return p


def run_continue3d(cfg: ExperimentConfig) -> Payload:
    bg = _background(cfg)
    grid = np.linspace(0.0, 1.0, cfg.t_steps + 1)
    res = newton_continuation_3d(bg, grid, NewtonConfig())
    p = Payload(["t", "residual", "newton_steps", "min_u", "max_u", "min_R", "QoverR_min", "QoverR_max"])
    for pt in res.points:
        m = ConformalMetric(bg, Convention.POWER_N5PLUS, pt.u)
        ratio = m.Q.values / m.R.values
        p.rows.append([pt.t, pt.residual, pt.newton_steps, pt.min_u, pt.max_u, pt.min_R,
                       float(ratio.min()), float(ratio.max())])
    p.summary = {"completed": res.completed, "last_t": res.last_t, "message": res.message}
    return p


def run_coeff_certificate(cfg: ExperimentConfig) -> Payload:
    p = Payload(["n", "identity_holds", "e_nonnegative", "windows_feasible", "ok", "C1", "I1", "C0", "I0"])
    for n in range(cfg.n, (cfg.n_max or cfg.n) + 1):
        rep = coefficient_certificate(n)
        c1, c0 = obata_coefficients(n, 1), obata_coefficients(n, 0)
        p.rows.append([n, rep.identity_holds, rep.e_nonnegative, rep.all_windows_feasible, rep.ok,
                       str(c1.C), str(c1.I), str(c0.C), str(c0.I)])
    p.summary = {"all_ok": all(r[4] for r in p.rows)}
    return p


def run_duality_scan(cfg: ExperimentConfig) -> Payload:
    bg = _background(cfg)
    rng = np.random.default_rng(cfg.seed)
    fields = [random_y4_cone(bg, rng)[0] for _ in range(cfg.samples)]

    def row(item):
        i, u = item
        theta, ytil, prod = duality_product(bg, u)
        return [i, theta, ytil, prod]

    p = Payload(["index", "theta", "ytilde", "product"])
    p.rows = _map(row, list(enumerate(fields)))
    p.summary = {"max_product": max(r[3] for r in p.rows)}
    return p


def run_convexity_scan(cfg: ExperimentConfig) -> Payload:
    bg = _background(cfg)
    rng = np.random.default_rng(cfg.seed)
    items = []
    for i in range(cfg.samples):
        mu, _ = random_admissible(bg, rng, Convention.POWER_SCALAR)
        mv, _ = random_admissible(bg, rng, Convention.POWER_SCALAR)
        items.append((i, mu.u, mv.u, float(rng.uniform(0.0, 1.0))))

    def row(item):
        i, u, v, t = item
        lo, scale = convexity_margin(bg, u, v, t)
        return [i, t, lo, scale, lo / scale]

    p = Payload(["index", "t", "min_L0w", "scale", "relative_margin"])
    p.rows = _map(row, items)
    p.summary = {"min_relative_margin": min(r[4] for r in p.rows)}
    return p


def _need(*names: str) -> Callable[[ExperimentConfig], None]:
    def check(cfg: ExperimentConfig) -> None:
        for name in names:
            if getattr(cfg, name) is None:
                raise ConfigError(f"{cfg.experiment} needs {name}")
        if cfg.n is not None and cfg.n < 3:
            raise ConfigError("n must be at least 3")
    return check


def _need_min_n(lo: int, *names: str) -> Callable[[ExperimentConfig], None]:
    base = _need("n", *names)

    def check(cfg: ExperimentConfig) -> None:
        base(cfg)
        if cfg.n < lo:
            raise ConfigError(f"{cfg.experiment} needs n >= {lo}")
        if cfg.n_max is not None and cfg.n_max < cfg.n:
            raise ConfigError("n_max must be at least n")
    return check


def _check_flow4(cfg: ExperimentConfig) -> None:
    _need("n", "N", "L", "amplitude", "mode")(cfg)
    if cfg.n != 4:
        raise ConfigError("flow4 needs n = 4")


def _check_sub(cfg: ExperimentConfig) -> None:
    _need_min_n(5, "N", "L", "eps", "amplitude", "mode")(cfg)


def _check_cont(cfg: ExperimentConfig) -> None:
    _need_min_n(5, "N", "L", "schedule", "amplitude", "mode")(cfg)


def _check_3d(cfg: ExperimentConfig) -> None:
    _need("n", "N", "L")(cfg)
    if cfg.n != 3:
        raise ConfigError("continue3d needs n = 3")


@dataclass(frozen=True)
class Experiment:
    description: str
    runner: Callable[[ExperimentConfig], Payload]
    defaults: dict[str, Any]
    check: Callable[[ExperimentConfig], None]


_SCAN = {"N": 256, "L": 96}
_FLOW = {"N": 64, "L": 24}

EXPERIMENTS: dict[str, Experiment] = {
    "constants": Experiment("closed-form sphere constants for n..n_max", run_constants,
                            {"n": 5, "n_max": 10}, _need_min_n(5)),
    "sobolev-scan": Experiment("Sobolev deficit and sigma_2/sigma_1 margin on random admissible metrics",
                               run_sobolev_scan, {"n": 6, "samples": 1000, **_SCAN},
                               _need_min_n(5, "N", "L", "samples")),
    "obata-check": Experiment("Obata identity residuals on random metrics and exponents", run_obata_check,
                              {"n": 5, "samples": 100, **_SCAN}, _need_min_n(5, "N", "L", "samples")),
    "flow4": Experiment("four-dimensional nonlocal flow trace", run_flow4_experiment,
                        {"n": 4, "kind": "product:2,2", "amplitude": 0.1, "mode": 2, **_FLOW}, _check_flow4),
    "subcritical": Experiment("subcritical nonlocal flow trace", run_subcritical_experiment,
                              {"n": 5, "eps": 0.2, "amplitude": 0.2, "mode": 1, **_FLOW}, _check_sub),
    "eps-continuation": Experiment("subcritical limits along a decreasing eps schedule", run_eps_continuation,
                                   {"n": 5, "schedule": [0.3, 0.2, 0.1, 0.05], "amplitude": 0.2, "mode": 1,
                                    **_FLOW}, _check_cont),
    "continue3d": Experiment("Newton continuation of the n = 3 path equation", run_continue3d,
                             {"n": 3, **_FLOW}, _check_3d),
    "coeff-certificate": Experiment("exact coefficient certificate for n..n_max", run_coeff_certificate,
                                    {"n": 5, "n_max": 50}, _need_min_n(5)),
    "duality-scan": Experiment("duality product on random metrics in the Y4 cone", run_duality_scan,
                               {"n": 5, "samples": 500, "N": 128, "L": 48}, _need_min_n(5, "N", "L", "samples")),
    "convexity-scan": Experiment("conformal Laplacian of geometric means u^t v^(1-t)", run_convexity_scan,
                                 {"n": 5, "samples": 200, "N": 128, "L": 48}, _need("n", "N", "L", "samples")),
}


# ---------------------------------------------------------------------------
# entry points


def write_outputs(cfg: ExperimentConfig, payload: Payload, out: str | None) -> None:
    body = render_csv(payload) if cfg.format == "csv" else render_json(payload)
    if out is None:
        sys.stdout.write(body)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(body)
    meta = json.dumps(metadata(cfg, payload), indent=2, sort_keys=True) + "\n"
    path.with_name(path.name + ".meta.json").write_text(meta)


def run_experiment(cfg: ExperimentConfig, out: str | None = None) -> int:
    """Run one experiment and write its artifacts; returns the exit status."""
    out = out if out is not None else cfg.output_path
    try:
        payload = EXPERIMENTS[cfg.experiment].runner(cfg)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        if isinstance(exc.trace, FlowTrace):
            write_outputs(cfg, _trace_payload(exc.trace, []), out)
        return EXIT_INVARIANT
    except PreconditionError as exc:
        print(f"precondition violated: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    write_outputs(cfg, payload, out)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qrlab", description=__doc__.split("\n\n")[0])
    parser.add_argument("experiment", help="experiment name, or 'list'")
    parser.add_argument("--config", help="JSON object or key=value file")
    parser.add_argument("--out", help="payload path; a .meta.json sidecar is written next to it")
    parser.add_argument("--seed", type=int)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.experiment == "list":
            width = max(map(len, EXPERIMENTS))
            for name, exp in EXPERIMENTS.items():
                print(f"{name:<{width}}  {exp.description}")
            return EXIT_OK
        raw = {}
        if args.config:
            try:
                raw = parse_config_text(Path(args.config).read_text())
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from None
        cfg = make_config(args.experiment, raw, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run_experiment(cfg, args.out)


if __name__ == "__main__":
    sys.exit(main())

"""Experiment dispatch, artifact writing and deterministic summaries."""
from __future__ import annotations

import hashlib
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import control, observability as obs
from .config import ConfigError, RunConfig
from .fieldio import to_bytes
from .geometry import (VelocityField, build_grid, build_region_mask, build_time_set,
                       shape_from_dict)
from .operators import (FactorizationError, NotDivergenceFreeError, build_operators,
                        operator_identity_residuals)
from .sampling import mode_velocity, random_stream, random_velocity, sample_rng
from .spectral import (DENSE_MAX_N, EigenSizeError, ForcingSupportError,
                       closed_form_eigenvalues, eigendecompose, energy_identity_residual,
                       solve_stokes_free)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INTERNAL = 0, 2, 3, 4

# module errors that signal a numerical or domain failure rather than a bug
NUMERIC_ERRORS = (ArithmeticError, np.linalg.LinAlgError, obs.ZeroEnergyError,
                  obs.ObservabilityDegenerateError, obs.UCFitError, control.BracketError,
                  control.SynthesisError, NotDivergenceFreeError, FactorizationError,
                  EigenSizeError, ForcingSupportError)

CATALOG = (
    ("simulate", "free Stokes evolution with energy-identity check",
     ["experiment", "n", "T", "simulate.initial"]),
    ("diagnostics", "operator identities, eigenvalues, energy, log-convexity and chain checks",
     ["experiment", "n", "T", "diagnostics.cases"]),
    ("uc-fit", "fit (N, alpha) of the two-time interpolation inequality with holdout",
     ["experiment", "n", "T", "region", "uc_fit.samples", "uc_fit.holdout"]),
    ("obs-constant", "multi-start lower bound for the observability constant",
     ["experiment", "n", "T", "region", "time_set", "obs_constant.m"]),
    ("min-norm", "minimal-norm null control by smoothed duality",
     ["experiment", "n", "T", "region", "time_set", "min_norm.m"]),
    ("min-time", "minimal control time for a norm budget by bisection",
     ["experiment", "n", "region", "min_time.budget", "min_time.T_lo", "min_time.T_hi"]),
)


def list_experiments() -> list[dict]:
    return [{"name": n, "description": d, "required": list(r)} for n, d, r in CATALOG]


def _clean(x):
    """JSON-safe plain Python values; non-finite floats become strings."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    return x


def canonical_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass
class Collector:
    """Single sink for every file an experiment writes."""
    root: Path
    formats: tuple[str, ...]
    written: list[str] = field(default_factory=list)

    def write(self, name: str, data: str | bytes, fmt: str) -> None:
        if fmt not in self.formats:
            return
        path = (self.root / name).resolve()
        if self.root.resolve() not in path.parents:
            raise ValueError(f"refusing to write outside the output directory: {name}")
        if isinstance(data, bytes):
            path.write_bytes(data)
        else:
            path.write_text(data)
        self.written.append(name)


@dataclass
class Checks:
    items: dict = field(default_factory=dict)

    def add(self, name: str, value: float, tolerance: float, passed: bool) -> None:
        self.items[name] = {"value": value, "tolerance": tolerance, "passed": bool(passed)}

    def at_most(self, name, value, tolerance):
        self.add(name, value, tolerance, value <= tolerance)

    def at_least(self, name, value, tolerance):
        self.add(name, value, tolerance, value >= tolerance)

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.items.values())


@dataclass(frozen=True)
class RunOutcome:
    status: int
    summary: dict
    summary_path: Path | None

    @property
    def summary_hash(self) -> str:
        return self.summary.get("summary_hash", "")


class _Context:
    def __init__(self, cfg: RunConfig):
        if cfg.n > DENSE_MAX_N:
            raise ConfigError(f"experiments need the dense eigenbasis, n <= {DENSE_MAX_N}", "n")
        self.cfg = cfg
        self.grid = build_grid(cfg.n)
        self.ops = build_operators(self.grid)
        self.basis = eigendecompose(self.ops)
        self.omega = build_region_mask(self.grid, shape_from_dict(cfg.region))
        self.E = build_time_set(cfg.time_set, cfg.T)

    def modes(self, m: int) -> int:
        return min(m, self.basis.size)

    def initial_velocity(self, p, index: int = 0, modes: int | None = None) -> VelocityField:
        """Unit-norm-scaled mode ``p.mode`` or a seeded random field on ``modes`` modes."""
        if p.initial == "mode":
            lam = self.basis.eigenvalues[p.mode - 1]
            return mode_velocity(self.basis, self.ops, p.mode - 1, p.amplitude / math.sqrt(lam))
        rng = sample_rng(self.cfg.seed, index)
        return random_velocity(self.basis, self.ops, rng, modes) * p.amplitude


def _run_simulate(ctx: _Context, out: Collector, checks: Checks) -> dict:
    cfg, p = ctx.cfg, ctx.cfg.simulate
    u0 = ctx.initial_velocity(p, modes=ctx.modes(p.m))
    times = np.linspace(0.0, cfg.T, p.samples)
    trace = solve_stokes_free(ctx.basis, ctx.ops, u0, cfg.T, times, region=ctx.omega)
    residual = energy_identity_residual(trace)
    checks.at_most("energy_identity", residual, cfg.tolerances.energy)
    out.write("trace.csv", trace.to_csv(), "csv")
    out.write("velocity_T.bin", to_bytes(trace.velocity(len(times) - 1)), "bin")
    n0 = trace.norm_full[0]
    return {"energy_residual": residual, "norm_0": n0, "norm_T": trace.norm_full[-1],
            "norm_T_region": trace.norm_region[-1],
            "decay_ratio": trace.norm_full[-1] / n0 if n0 > 0 else 0.0}


def _run_diagnostics(ctx: _Context, out: Collector, checks: Checks) -> dict:
    cfg, p, tol = ctx.cfg, ctx.cfg.diagnostics, ctx.cfg.tolerances
    ident = operator_identity_residuals(ctx.ops, sample_rng(cfg.seed, 0), p.probes)
    for k, v in ident.items():
        checks.at_most(f"operator_{k}", v, tol.operator)
    exact = closed_form_eigenvalues(cfg.n)
    eig_err = float(np.max(np.abs(ctx.basis.eigenvalues - exact) / exact))
    checks.at_most("eigen_closed_form", eig_err, tol.eigen)
    times = np.linspace(0.0, cfg.T, p.samples)
    energy, margins, chain_fail = [], [], 0
    for c in range(p.cases):
        rng = sample_rng(cfg.seed, 10 + c)
        u0 = random_velocity(ctx.basis, ctx.ops, rng, ctx.modes(p.m))
        energy.append(energy_identity_residual(solve_stokes_free(ctx.basis, ctx.ops, u0, cfg.T, times)))
        psi0 = random_stream(ctx.basis, rng, ctx.modes(p.m))
        margins.append(obs.log_convexity_margin(obs.energy_series(ctx.basis, ctx.ops, psi0, times)))
        t1 = rng.uniform(0.0, 0.5 * cfg.T)
        t2 = rng.uniform(t1 + 0.02 * cfg.T, cfg.T)
        report = obs.interpolation_chain_check(ctx.basis, ctx.ops, psi0, t1, t2)
        chain_fail += not obs.chain_satisfied(report)
    checks.at_most("energy_identity", max(energy), tol.energy)
    checks.at_least("log_convexity", min(margins), -tol.log_convexity)
    checks.at_most("chain_violations", chain_fail, 0)
    out.write("diagnostics.csv", "case,energy_residual,log_convexity_margin\n" + "".join(
        f"{i},{e!r},{m!r}\n" for i, (e, m) in enumerate(zip(energy, margins))), "csv")
    return {"operator": ident, "eigen_max_rel_error": eig_err, "energy_max": max(energy),
            "log_convexity_min": min(margins), "chain_violations": chain_fail,
            "cases": p.cases}


def _run_uc_fit(ctx: _Context, out: Collector, checks: Checks) -> dict:
    cfg, p = ctx.cfg, ctx.cfg.uc_fit
    batch = obs.uc_sample_batch(cfg.seed, p.samples, cfg.T)
    records = obs.evaluate_uc_samples(ctx.basis, ctx.ops, batch, ctx.omega, cfg.seed, ctx.modes(p.m))
    fit = obs.fit_uc_records(records)
    hold = obs.evaluate_uc_samples(ctx.basis, ctx.ops,
                                   obs.uc_sample_batch(cfg.seed, p.holdout, cfg.T, p.samples),
                                   ctx.omega, cfg.seed, ctx.modes(p.m))
    bad = fit.violations(hold)
    refit = obs.fit_uc_records(records + hold) if bad else fit
    growth = refit.per_alpha[fit.alpha] / fit.N
    checks.add("alpha_open_unit", fit.alpha, 1.0, 0 < fit.alpha < 1)
    checks.add("N_finite", fit.N, math.inf, math.isfinite(fit.N))
    checks.at_most("holdout_violations", len(bad), cfg.tolerances.holdout_violations)
    checks.at_most("refit_growth", growth, 1.1)
    out.write("uc_records.csv", "seed,t1,t2,norm_t1,norm_t2,norm_t2_region,quotient\n" + "".join(
        f"{r.seed},{r.t1!r},{r.t2!r},{r.norm_t1!r},{r.norm_t2!r},{r.norm_t2_region!r},"
        f"{r.quotient(fit.alpha)!r}\n" for r in records), "csv")
    return {"fit": fit.to_dict(), "holdout": len(hold), "holdout_violations": [r.seed for r in bad],
            "refit_alpha": refit.alpha, "refit_N": refit.N, "refit_growth_same_alpha": growth}


def _run_obs_constant(ctx: _Context, out: Collector, checks: Checks) -> dict:
    cfg, p = ctx.cfg, ctx.cfg.obs_constant
    est = obs.estimate_observability_constant(ctx.basis, ctx.ops, cfg.T, ctx.omega, ctx.E, ctx.modes(p.m),
                                              p.starts, p.max_iter, cfg.seed)
    checks.at_most("dispersion", est.dispersion, cfg.tolerances.dispersion)
    out.write("vT.bin", to_bytes(est.vT), "bin")
    out.write("start_ratios.csv", "start,ratio\n" + "".join(
        f"{i},{r!r}\n" for i, r in enumerate(est.start_ratios)), "csv")
    return est.to_dict()


def _run_min_norm(ctx: _Context, out: Collector, checks: Checks) -> dict:
    cfg, p, tol = ctx.cfg, ctx.cfg.min_norm, ctx.cfg.tolerances
    cases = []
    for c in range(p.cases):
        u0 = ctx.initial_velocity(p, c)
        problem = control.ControlProblem(u0, cfg.T, ctx.omega, ctx.E, ctx.modes(p.m), p.per_interval)
        M, res = control.minimal_norm(ctx.basis, ctx.ops, problem)
        cases.append(res.to_dict())
        if c == 0:
            out.write("control.csv", res.to_csv(), "csv")
            out.write("control_first.bin", to_bytes(res.forcing.sample(0)), "bin")
    checks.at_most("rho", max(c["rho"] for c in cases), tol.rho)
    checks.at_most("support_violations", max(c["support_violations"] for c in cases), 0)
    checks.at_most("duality", max(c["duality_max"] for c in cases), tol.duality)
    checks.at_most("bang_bang_deviation", max(c["deviation"] for c in cases), tol.bang_bang)
    return {"cases": cases}


def _run_min_time(ctx: _Context, out: Collector, checks: Checks) -> dict:
    cfg, p = ctx.cfg, ctx.cfg.min_time
    u0 = ctx.initial_velocity(p)
    res = control.minimal_time_bisection(ctx.basis, ctx.ops, u0, p.budget, ctx.omega, p.T_lo,
                                         p.T_hi, m=ctx.modes(p.m), iterations=p.iterations)
    checks.at_most("norm_at_T_hi", res.norm_hi, p.budget)
    checks.at_most("bang_bang_deviation", res.deviation_hi, cfg.tolerances.bang_bang)
    out.write("control_T_hi.csv", res.result_hi.to_csv(), "csv")
    out.write("bisection.csv", "T,minimal_norm\n" + "".join(
        f"{t!r},{m!r}\n" for t, m in res.history), "csv")
    return res.to_dict()


RUNNERS = {
    "simulate": _run_simulate,
    "diagnostics": _run_diagnostics,
    "uc-fit": _run_uc_fit,
    "obs-constant": _run_obs_constant,
    "min-norm": _run_min_norm,
    "min-time": _run_min_time,
}


def _finish(cfg: RunConfig | None, out_dir: Path, body: dict, started: float,
            status: int) -> RunOutcome:
    body["status"] = status
    body["summary_hash"] = hashlib.sha256(canonical_json(body).encode()).hexdigest()
    summary = dict(body)
    summary["timestamps"] = {
        "finished": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "elapsed_seconds": round(time.perf_counter() - started, 3)}
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "summary.json"
    path.write_text(json.dumps(_clean(summary), sort_keys=True, indent=2) + "\n")
    return RunOutcome(status, summary, path)


def run_experiment(cfg: RunConfig) -> RunOutcome:
    """Run one experiment and write ``summary.json`` plus artifacts to the output dir.

    ``summary_hash`` covers everything except the ``timestamps`` field.
    """
    started = time.perf_counter()
    out_dir = Path(cfg.output.dir)
    body = {"experiment": cfg.experiment, "config_hash": cfg.config_hash(), "seed": cfg.seed,
            "tolerances": cfg.to_dict()["tolerances"]}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        collector = Collector(out_dir, tuple(cfg.output.formats))
        checks = Checks()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            ctx = _Context(cfg)
            metrics = RUNNERS[cfg.experiment](ctx, collector, checks)
        body["metrics"] = metrics
        body["checks"] = checks.items
        body["passed"] = checks.passed
        body["warnings"] = sorted({str(w.message) for w in caught})
        if "json" in cfg.output.formats:
            collector.write("metrics.json", json.dumps(_clean(metrics), sort_keys=True, indent=2), "json")
        body["artifacts"] = sorted(collector.written)
        return _finish(cfg, out_dir, body, started, EXIT_OK if checks.passed else EXIT_NUMERIC)
    except ConfigError as exc:
        body["error"] = exc.to_dict()
        return _finish(cfg, out_dir, body, started, EXIT_CONFIG)
    except NUMERIC_ERRORS as exc:
        body["error"] = {"type": "numeric", "class": type(exc).__name__, "message": str(exc)}
        return _finish(cfg, out_dir, body, started, EXIT_NUMERIC)
    except Exception as exc:  # noqa: BLE001 - reported, not swallowed
        body["error"] = {"type": "internal", "class": type(exc).__name__, "message": str(exc)}
        return _finish(cfg, out_dir, body, started, EXIT_INTERNAL)

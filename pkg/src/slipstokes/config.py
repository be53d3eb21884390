"""Run configuration: TOML (or JSON) text to a validated, hashable record."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .geometry import (DegenerateRegionError, DegenerateTimeSetError, GridSizeError,
                       build_grid, build_region_mask, build_time_set, shape_from_dict)

EXPERIMENTS = ("simulate", "diagnostics", "uc-fit", "obs-constant", "min-norm", "min-time")
FORMATS = ("csv", "json", "bin")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key path."""

    def __init__(self, message: str, field: str | None = None,
                 line: int | None = None, column: int | None = None):
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}, column {column}")
        super().__init__(f"{message} ({'; '.join(where)})" if where else message)
        self.field = field
        self.line = line
        self.column = column

    def to_dict(self) -> dict:
        return {"type": "config", "message": str(self), "field": self.field,
                "line": self.line, "column": self.column}


@dataclass(frozen=True)
class Tolerances:
    energy: float = 1e-10
    log_convexity: float = 1e-12
    operator: float = 1e-12
    eigen: float = 1e-10
    rho: float = 1e-3
    duality: float = 1e-8
    bang_bang: float = 1e-10
    dispersion: float = 1.5
    holdout_violations: int = 2


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "out"
    formats: tuple[str, ...] = ("json",)


@dataclass(frozen=True)
class SimulateParams:
    initial: str = "random"      # "random" or "mode"
    mode: int = 1                # 1-based, used when initial = "mode"
    amplitude: float = 1.0
    m: int = 64
    samples: int = 33


@dataclass(frozen=True)
class DiagnosticsParams:
    cases: int = 50
    probes: int = 100
    samples: int = 33
    m: int = 64


@dataclass(frozen=True)
class UCFitParams:
    samples: int = 200
    holdout: int = 200
    m: int = 64


@dataclass(frozen=True)
class ObsConstantParams:
    m: int = 32
    starts: int = 20
    max_iter: int = 500


@dataclass(frozen=True)
class MinNormParams:
    m: int = 32
    cases: int = 1
    initial: str = "random"
    mode: int = 1
    amplitude: float = 1.0
    per_interval: int = 64


@dataclass(frozen=True)
class MinTimeParams:
    budget: float = 0.0
    T_lo: float = 0.0
    T_hi: float = 0.0
    m: int = 1
    initial: str = "mode"
    mode: int = 1
    amplitude: float = 1.0
    iterations: int = 20


SECTIONS = {
    "simulate": SimulateParams,
    "diagnostics": DiagnosticsParams,
    "uc_fit": UCFitParams,
    "obs_constant": ObsConstantParams,
    "min_norm": MinNormParams,
    "min_time": MinTimeParams,
    "tolerances": Tolerances,
    "output": OutputConfig,
}
TOP_LEVEL = {"experiment": str, "n": int, "T": float, "seed": int}
DEFAULT_REGION = {"kind": "rectangle", "bounds": [[0.0, 0.5], [0.0, 0.5]]}
DEFAULT_TIME_SET = [[0.2, 0.8]]


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    n: int = 16
    T: float = 1.0
    seed: int = 0
    region: dict = field(default_factory=lambda: dict(DEFAULT_REGION))
    time_set: tuple[tuple[float, float], ...] = tuple(map(tuple, DEFAULT_TIME_SET))
    simulate: SimulateParams = SimulateParams()
    diagnostics: DiagnosticsParams = DiagnosticsParams()
    uc_fit: UCFitParams = UCFitParams()
    obs_constant: ObsConstantParams = ObsConstantParams()
    min_norm: MinNormParams = MinNormParams()
    min_time: MinTimeParams = MinTimeParams()
    tolerances: Tolerances = Tolerances()
    output: OutputConfig = OutputConfig()

    @property
    def section_name(self) -> str:
        return self.experiment.replace("-", "_")

    @property
    def params(self):
        return getattr(self, self.section_name)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {k: getattr(self, k) for k in TOP_LEVEL}
        out["region"] = json.loads(json.dumps(self.region))
        out["time_set"] = {"intervals": [list(iv) for iv in self.time_set]}
        for name in SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def config_hash(self) -> str:
        """Hash of everything that affects results; the output directory is excluded."""
        data = self.to_dict()
        del data["output"]["dir"]
        canon = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        return validate_config(dataclasses.replace(self, **changes))


# -- loading ----------------------------------------------------------------

def _coerce(value, kind, where):
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", where)
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", where)
        return value
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", where)
        return value
    if kind == "tuple[str, ...]":
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"expected a list of strings, got {value!r}", where)
        return tuple(value)
    raise ConfigError(f"unsupported field type {kind}", where)


_TYPES = {"float": float, "int": int, "str": str}


def _load_section(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError("expected a table", where)
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key '{key}'", f"{where}.{key}")
        kind = known[key].type
        kwargs[key] = _coerce(value, _TYPES.get(kind, kind), f"{where}.{key}")
    return cls(**kwargs)


def _location(exc: Exception) -> tuple[int | None, int | None]:
    m = re.search(r"line (\d+), column (\d+)", str(exc))
    return (int(m.group(1)), int(m.group(2))) if m else (None, None)


def _parse_text(text: str) -> dict:
    stripped = text.lstrip()
    if not stripped:
        raise ConfigError("configuration text is empty")
    if stripped.startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"JSON parse error: {exc.msg}", line=exc.lineno,
                              column=exc.colno) from None
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        line, col = _location(exc)
        raise ConfigError(f"TOML parse error: {exc}", line=line, column=col) from None


def config_from_dict(data: dict, experiment: str | None = None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a table at the top level")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in TOP_LEVEL:
            kwargs[key] = _coerce(value, TOP_LEVEL[key], key)
        elif key in SECTIONS:
            kwargs[key] = _load_section(SECTIONS[key], value, key)
        elif key == "region":
            if not isinstance(value, dict):
                raise ConfigError("expected a table", "region")
            kwargs["region"] = value
        elif key == "time_set":
            if not isinstance(value, dict) or set(value) - {"intervals"}:
                bad = sorted(set(value) - {"intervals"}) if isinstance(value, dict) else []
                raise ConfigError("expected a table with 'intervals' only",
                                  f"time_set.{bad[0]}" if bad else "time_set")
            ivs = value.get("intervals", DEFAULT_TIME_SET)
            try:
                kwargs["time_set"] = tuple((float(a), float(b)) for a, b in ivs)
            except (TypeError, ValueError):
                raise ConfigError("intervals must be a list of [start, end] pairs",
                                  "time_set.intervals") from None
        else:
            raise ConfigError(f"unknown key '{key}'", key)
    if experiment is not None:
        if "experiment" in kwargs and kwargs["experiment"] != experiment:
            raise ConfigError(f"config selects '{kwargs['experiment']}' but the command is "
                              f"'{experiment}'", "experiment")
        kwargs["experiment"] = experiment
    if "experiment" not in kwargs:
        raise ConfigError("missing experiment selector", "experiment")
    return validate_config(RunConfig(**kwargs))


def validate_config(cfg: RunConfig) -> RunConfig:
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment '{cfg.experiment}', expected one of "
                          f"{', '.join(EXPERIMENTS)}", "experiment")
    try:
        grid = build_grid(cfg.n)
    except GridSizeError as exc:
        raise ConfigError(str(exc), "n") from None
    if not (math.isfinite(cfg.T) and cfg.T > 0):
        raise ConfigError("horizon must be positive and finite", "T")
    if cfg.seed < 0:
        raise ConfigError("seed must be nonnegative", "seed")
    try:
        build_region_mask(grid, shape_from_dict(cfg.region))
    except (DegenerateRegionError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid region: {exc}", "region") from None
    if any(a < 0 or b > cfg.T for a, b in cfg.time_set):
        raise ConfigError(f"intervals must lie inside [0, T={cfg.T}]", "time_set")
    try:
        build_time_set(cfg.time_set, cfg.T)
    except (DegenerateTimeSetError, ValueError) as exc:
        raise ConfigError(f"invalid time set: {exc}", "time_set") from None
    for name, value in dataclasses.asdict(cfg.tolerances).items():
        if not value > 0 and name != "holdout_violations":
            raise ConfigError("tolerances must be positive", f"tolerances.{name}")
    if cfg.tolerances.holdout_violations < 0:
        raise ConfigError("must be nonnegative", "tolerances.holdout_violations")
    bad = [f for f in cfg.output.formats if f not in FORMATS]
    if bad:
        raise ConfigError(f"unknown format '{bad[0]}'", "output.formats")
    _validate_params(cfg, grid.node_count)
    return cfg


def _positive(cfg, name, minimum=1):
    value = getattr(cfg.params, name)
    if value < minimum:
        raise ConfigError(f"must be at least {minimum}, got {value}", f"{cfg.section_name}.{name}")


def _validate_params(cfg: RunConfig, modes: int) -> None:
    p = cfg.params
    sec = cfg.section_name
    # cutoffs above the mode count are clamped to n**2 at run time
    if hasattr(p, "m") and p.m < 1:
        raise ConfigError("mode cutoff must be at least 1", f"{sec}.m")
    if hasattr(p, "initial"):
        if p.initial not in ("random", "mode"):
            raise ConfigError("initial must be 'random' or 'mode'", f"{sec}.initial")
        if not 1 <= p.mode <= modes:
            raise ConfigError(f"mode must be in [1, {modes}]", f"{sec}.mode")
    if cfg.experiment == "simulate":
        _positive(cfg, "samples", 2)
    elif cfg.experiment == "diagnostics":
        _positive(cfg, "cases")
        _positive(cfg, "probes")
        _positive(cfg, "samples", 2)
    elif cfg.experiment == "uc-fit":
        _positive(cfg, "samples", 10)
        _positive(cfg, "holdout", 0)
    elif cfg.experiment == "obs-constant":
        _positive(cfg, "starts")
        _positive(cfg, "max_iter")
    elif cfg.experiment == "min-norm":
        _positive(cfg, "cases")
        _positive(cfg, "per_interval")
    elif cfg.experiment == "min-time":
        if not p.budget > 0:
            raise ConfigError("control budget must be positive", "min_time.budget")
        if not 0 < p.T_lo < p.T_hi:
            raise ConfigError("need 0 < T_lo < T_hi", "min_time.T_lo")
        _positive(cfg, "iterations")


def parse_config(source: str | Path, experiment: str | None = None) -> RunConfig:
    """Parse a config file path, or inline TOML/JSON text when ``source`` is text.

    A ``str`` containing a newline or starting with ``{`` is treated as text.
    """
    if isinstance(source, Path) or ("\n" not in source and not source.lstrip().startswith("{")
                                    and "=" not in source):
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
    else:
        text = source
    return config_from_dict(_parse_text(text), experiment)


def default_config(experiment: str, **overrides) -> RunConfig:
    return validate_config(RunConfig(experiment=experiment, **overrides))

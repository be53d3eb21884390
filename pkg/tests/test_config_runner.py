from __future__ import annotations

import json
import os
import subprocess
import sys

import pytest
from hypothesis import given, settings, strategies as st

from slipstokes.cli import main
from slipstokes.config import (EXPERIMENTS, SECTIONS, TOP_LEVEL, ConfigError, RunConfig,
                               config_from_dict, default_config, parse_config)
from slipstokes.runner import (EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, canonical_json,
                               list_experiments, run_experiment)

SMALL_MIN_TIME = """
experiment = "min-time"
n = 8
region = { kind = "rectangle", bounds = [[0.0, 1.0], [0.0, 1.0]] }
[min_time]
budget = 0.5
T_lo = 0.01
T_hi = 1.0
iterations = 8
"""


def with_dir(cfg: RunConfig, path) -> RunConfig:
    return cfg.replace(output=type(cfg.output)(dir=str(path), formats=("csv", "json", "bin")))


def test_minimal_config_gets_defaults():
    cfg = parse_config('experiment = "simulate"\n')
    assert cfg.n == 16 and cfg.T == 1.0 and cfg.seed == 0
    assert cfg.time_set == ((0.2, 0.8),)
    assert cfg.simulate.initial == "random"
    assert cfg.tolerances.energy == 1e-10


def test_time_set_outside_horizon_names_field():
    with pytest.raises(ConfigError) as info:
        parse_config('experiment = "min-norm"\nT = 1.0\ntime_set = { intervals = [[0.5, 1.5]] }\n')
    assert info.value.field == "time_set"


@pytest.mark.parametrize("verb", EXPERIMENTS)
def test_round_trip(verb):
    overrides = {"min_time": type(RunConfig.min_time)(budget=1.0, T_lo=0.1, T_hi=1.0)} \
        if verb == "min-time" else {}
    cfg = default_config(verb, n=8, seed=3, **overrides)
    again = parse_config(cfg.to_toml())
    assert again.to_dict() == cfg.to_dict()
    assert again.to_toml() == cfg.to_toml()
    assert again.config_hash() == cfg.config_hash()


def test_unknown_key_is_located():
    with pytest.raises(ConfigError) as info:
        parse_config('experiment = "simulate"\n[simulate]\nbogus = 1\n')
    assert info.value.field == "simulate.bogus"
    with pytest.raises(ConfigError) as info:
        parse_config('experiment = "simulate"\nwat = 2\n')
    assert info.value.field == "wat"


def test_syntax_error_has_line_and_column():
    with pytest.raises(ConfigError) as info:
        parse_config('experiment = "simulate"\nn = = 3\n')
    assert info.value.line == 2 and info.value.column is not None


def test_json_input_and_verb_mismatch():
    cfg = parse_config('{"experiment": "uc-fit", "n": 8}')
    assert cfg.experiment == "uc-fit" and cfg.n == 8
    with pytest.raises(ConfigError) as info:
        config_from_dict({"experiment": "simulate"}, experiment="uc-fit")
    assert info.value.field == "experiment"


@pytest.mark.parametrize("text, field", [
    ('n = 1', "n"), ("T = -1.0", "T"), ("seed = -4", "seed"),
    ('[uc_fit]\nsamples = 0', "uc_fit.samples"),
    ('[tolerances]\nenergy = 0.0', "tolerances.energy"),
    ('[output]\nformats = ["xml"]', "output.formats"),
    ('region = { kind = "rectangle", bounds = [[0.0, 0.01], [0.0, 0.01]] }', "region"),
])
def test_validation_fields(text, field):
    with pytest.raises(ConfigError) as info:
        parse_config(f'experiment = "uc-fit"\n{text}\n')
    assert info.value.field == field


@given(st.integers(2, 64), st.floats(0.1, 5.0), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_round_trip_property(n, T, seed):
    cfg = default_config("obs-constant", n=n, T=T, seed=seed, time_set=((0.0, T),))
    assert parse_config(cfg.to_toml()).to_dict() == cfg.to_dict()


def test_simulate_mode_energy(tmp_path):
    cfg = parse_config('experiment = "simulate"\nn = 8\n[simulate]\ninitial = "mode"\nmode = 1\n')
    out = run_experiment(with_dir(cfg, tmp_path))
    assert out.status == EXIT_OK
    check = out.summary["checks"]["energy_identity"]
    assert check["value"] <= 1e-10 and check["passed"]
    assert {"summary.json", "trace.csv", "velocity_T.bin", "metrics.json"} <= {
        p.name for p in tmp_path.iterdir()}


def test_determinism(tmp_path):
    cfg = default_config("uc-fit", n=8)
    cfg = cfg.replace(uc_fit=type(cfg.uc_fit)(samples=20, holdout=20, m=16))
    a = run_experiment(with_dir(cfg, tmp_path / "a"))
    b = run_experiment(with_dir(cfg, tmp_path / "b"))
    assert a.status == b.status == EXIT_OK
    assert a.summary_hash == b.summary_hash
    strip = lambda s: canonical_json({k: v for k, v in s.items() if k != "timestamps"})
    assert strip(json.loads(a.summary_path.read_text())) == strip(json.loads(b.summary_path.read_text()))
    for name in ("uc_records.csv", "metrics.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_catalog():
    cat = list_experiments()
    assert [c["name"] for c in cat] == list(EXPERIMENTS)
    for entry in cat:
        assert entry["description"]
        for key in entry["required"]:
            head, _, tail = key.partition(".")
            if tail:
                assert tail in SECTIONS[head].__dataclass_fields__
            else:
                assert head in TOP_LEVEL or head in ("region", "time_set")
    assert canonical_json(cat) == canonical_json(list_experiments())


def test_cli_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "ok.toml"
    cfg.write_text('experiment = "simulate"\nn = 6\n')
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o1")]) == EXIT_OK
    line = json.loads(capsys.readouterr().out)
    assert line["status"] == 0 and line["passed"]

    bad = tmp_path / "bad.toml"
    bad.write_text('experiment = "uc-fit"\n[uc_fit]\nsamples = 0\n')
    assert main(["uc-fit", "--config", str(bad), "--out", str(tmp_path / "o2")]) == EXIT_CONFIG
    assert "uc_fit.samples" in capsys.readouterr().err

    bracket = tmp_path / "bracket.toml"
    bracket.write_text(SMALL_MIN_TIME.replace("T_hi = 1.0", "T_hi = 0.02"))
    assert main(["min-time", "--config", str(bracket), "--out", str(tmp_path / "o3")]) == EXIT_NUMERIC
    summary = json.loads((tmp_path / "o3" / "summary.json").read_text())
    assert summary["error"]["class"] == "BracketError"
    assert json.loads(capsys.readouterr().out)["status"] == EXIT_NUMERIC

    assert main(["list"]) == EXIT_OK
    assert len(json.loads(capsys.readouterr().out)) == 6


def test_cli_min_time(tmp_path, capsys):
    cfg = tmp_path / "mt.toml"
    cfg.write_text(SMALL_MIN_TIME)
    assert main(["min-time", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    metrics = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert metrics["T_lo"] < metrics["T_hi"]


def test_no_writes_outside_output(tmp_path):
    work = tmp_path / "work"
    work.mkdir()
    (work / "run.toml").write_text('experiment = "min-norm"\nn = 8\n[min_norm]\nm = 8\n'
                                   '[output]\nformats = ["csv", "json", "bin"]\n')
    before = set(work.rglob("*"))
    env = dict(os.environ, PYTHONDONTWRITEBYTECODE="1")
    proc = subprocess.run([sys.executable, "-m", "slipstokes", "min-norm", "--config", "run.toml",
                           "--out", "results"], cwd=work, env=env, capture_output=True, text=True)
    assert proc.returncode == EXIT_OK, proc.stderr
    new = set(work.rglob("*")) - before
    assert new and all(p == work / "results" or (work / "results") in p.parents for p in new)

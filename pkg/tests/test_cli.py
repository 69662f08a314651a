from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monosde.cli import main
from monosde.config import ExperimentConfig, config_from_mapping, load_config
from monosde.csvio import fmt, read_csv, sha256_file, write_csv
from monosde.ensemble import chunk_ids, default_workers, simulate_ensemble
from monosde.errors import ConfigError
from monosde.experiments import manifest_path
from monosde.paths import TimeGrid

SMALL = {
    "simulate": ["--model", "ginzburg_landau", "--steps", "100", "--paths", "300"],
    "malliavin": ["--model", "duffing_van_der_pol", "--steps", "100", "--paths", "5"],
    "malliavin2": ["--model", "gbm", "--steps", "100", "--paths", "3", "--order", "2", "--coarsen", "10"],
    "hormander": ["--model", "kinetic", "--x", "0.5,0.5"],
    "verify": ["--model", "ginzburg_landau", "--steps", "128", "--paths", "300"],
    "density": ["--model", "ou", "--steps", "100", "--paths", "600"],
}


def _run(tmp_path, key, *extra, name="out.csv"):
    cmd = "malliavin" if key == "malliavin2" else key
    out = tmp_path / name
    code = main([cmd, *SMALL[key], "--out", str(out), *extra])
    return code, out


def test_simulate_zero_model_constant_rows(tmp_path):
    out = tmp_path / "z.csv"
    code = main(["simulate", "--model", "brownian", "--params", "scale=0", "--x0", "1.5", "--steps", "100", "--paths", "3", "--out", str(out)])
    assert code == 0
    header, rows = read_csv(out)
    assert header == ["path_id", "t", "X1"]
    assert len(rows) == 3 * 101
    assert {r[2] for r in rows} == {"1.5"}


def test_verify_ginzburg_landau_desk_config(tmp_path, capsys):
    code, out = _run(tmp_path, "verify", "--paths", "1000")
    assert code == 0
    man = json.loads(manifest_path(out).read_text())
    assert set(man["suites"]) == {"gateaux", "cameron_martin", "flow_identity", "moment"}
    assert all(man["suites"].values())
    assert "PASS" in capsys.readouterr().out


@pytest.mark.parametrize("key", sorted(SMALL))
def test_same_seed_same_bytes(tmp_path, key):
    _, a = _run(tmp_path, key, "--workers", "1", name="a.csv")
    _, b = _run(tmp_path, key, "--workers", "1", name="b.csv")
    assert sha256_file(a) == sha256_file(b)


@pytest.mark.parametrize("key", sorted(SMALL))
def test_workers_do_not_change_output(tmp_path, key):
    _, a = _run(tmp_path, key, "--workers", "1", name="a.csv")
    _, b = _run(tmp_path, key, "--workers", "4", name="b.csv")
    assert a.read_bytes() == b.read_bytes()


def test_seed_changes_output(tmp_path):
    _, a = _run(tmp_path, "simulate", "--seed", "1", name="a.csv")
    _, b = _run(tmp_path, "simulate", "--seed", "2", name="b.csv")
    assert sha256_file(a) != sha256_file(b)


def test_manifest_contents(tmp_path):
    code, out = _run(tmp_path, "simulate", "--seed", "7")
    man = json.loads(manifest_path(out).read_text())
    assert man["seed"] == 7 and man["exit_code"] == code == 0
    assert man["outputs"][0]["sha256"] == sha256_file(out)
    assert len(man["config_hash"]) == 64 and man["wall_time"] >= 0


def test_hormander_exit_codes(tmp_path, capsys):
    assert main(["hormander", "--model", "kinetic", "--out", str(tmp_path / "h.csv")]) == 0
    text = capsys.readouterr().out
    assert "satisfied at depth 1" in text
    assert read_csv(tmp_path / "h.csv")[1] == [["0", "1"], ["1", "2"]]
    code = main(["hormander", "--model", "brownian", "--params", "scale=0", "--depth", "2", "--out", str(tmp_path / "z.csv")])
    assert code == 1
    assert "inconclusive" in capsys.readouterr().out


def test_unknown_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"version": 1, "command": "simulate", "stepz": 10}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o.csv")]) == 2
    assert "stepz" in capsys.readouterr().err


def test_step_constraint_exits_2_before_running(tmp_path, capsys):
    out = tmp_path / "o.csv"
    # L = 50 and dt = 0.05 gives dt * L = 2.5
    code = main(["simulate", "--model", "ginzburg_landau", "--params", "eta=50", "--steps", "20", "--max-dt", "1", "--out", str(out)])
    assert code == 2
    assert "dt * L" in capsys.readouterr().err
    assert not out.exists()


def test_default_step_limit_and_override(tmp_path):
    out = tmp_path / "o.csv"
    assert main(["simulate", "--steps", "10", "--out", str(out)]) == 2
    assert main(["simulate", "--steps", "10", "--max-dt", "0.1", "--out", str(out)]) == 0


def test_divergence_exits_3(tmp_path, capsys):
    code = main(["simulate", "--model", "gbm", "--params", "mu=300,c=0", "--T", "20", "--steps", "20000", "--out", str(tmp_path / "d.csv")])
    assert code == 3
    assert "step" in capsys.readouterr().err


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"version": 1, "model": "ou", "steps": 200, "paths": 2}))
    out = tmp_path / "o.csv"
    assert main(["simulate", "--config", str(cfg), "--steps", "100", "--out", str(out)]) == 0
    _, rows = read_csv(out)
    assert len(rows) == 2 * 101


@pytest.mark.parametrize(
    "bad",
    [
        {"version": 2},
        {"model": "heston"},
        {"steps": 0},
        {"paths": 1.5},
        {"scheme": "explicit"},
        {"x0": [1.0, 2.0]},
        {"epsilons": [0.01, 0.1]},
        {"p_list": [1]},
        {"params": {"c": -1.0}},
        {"command": "density", "paths": 10},
    ],
)
def test_config_rejections_name_the_key(bad):
    with pytest.raises(ConfigError) as info:
        config_from_mapping(bad)
    assert info.value.key == next(iter(bad)) or (info.value.key == "paths" and "command" in bad)


def test_config_roundtrip(tmp_path):
    cfg = config_from_mapping({"model": "ou", "seed": 3, "steps": 200})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    again = load_config(path)
    assert again == cfg and again.digest() == cfg.digest()
    assert config_from_mapping({"seed": 4}).digest() != ExperimentConfig().digest()


def test_invalid_json_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_fmt_roundtrip(v):
    assert float(fmt(v)) == v


def test_csv_roundtrip_bit_exact(tmp_path):
    vals = np.random.default_rng(0).standard_normal((50, 4)) * np.logspace(-300, 300, 4)
    path = write_csv(tmp_path / "v.csv", ["a", "b", "c", "d"], vals)
    _, rows = read_csv(path)
    back = np.array(rows, dtype=float)
    assert np.array_equal(back, vals)


def test_simulate_csv_matches_memory(tmp_path):
    out = tmp_path / "s.csv"
    main(["simulate", "--model", "duffing_van_der_pol", "--steps", "100", "--paths", "4", "--out", str(out)])
    _, rows = read_csv(out)
    x0 = config_from_mapping({"model": "duffing_van_der_pol"})
    states = simulate_ensemble("duffing_van_der_pol", {}, x0.initial_state(x0.build_model()), TimeGrid(1.0, 100), 4, 0)
    assert np.array_equal(np.array(rows, dtype=float)[:, 2:].reshape(states.shape), states)


def test_chunks_independent_of_workers():
    assert [len(c) for c in chunk_ids(600)] == [256, 256, 88]
    a = simulate_ensemble("gbm", {}, [1.0], TimeGrid(1.0, 50), 300, 5, workers=1)
    b = simulate_ensemble("gbm", {}, [1.0], TimeGrid(1.0, 50), 300, 5, workers=3)
    assert np.array_equal(a, b)
    prefix = simulate_ensemble("gbm", {}, [1.0], TimeGrid(1.0, 50), 10, 5)
    assert np.array_equal(prefix, a[:10])


def test_workers_env(monkeypatch):
    monkeypatch.setenv("MONOSDE_WORKERS", "3")
    assert default_workers() == 3
    monkeypatch.setenv("MONOSDE_WORKERS", "many")
    with pytest.raises(ValueError):
        default_workers()


def test_module_entry_point(tmp_path):
    out = tmp_path / "h.csv"
    res = subprocess.run([sys.executable, "-m", "monosde", "hormander", "--model", "ou", "--out", str(out)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "satisfied at depth 0" in res.stdout

import csv
import json
from pathlib import Path

import pytest

from rpclab.cli import main
from rpclab.runner import (
    OUT_ENV,
    ConfigError,
    ExperimentConfig,
    RunFailure,
    RunReport,
    csv_text,
    emit,
    resolve_output,
    run,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL_CASCADE = {
    "experiment": "cascade",
    "seed": 7,
    "params": {"cascade": {"r": 1, "zetas": [0.5], "d": 50}, "builds": 400, "pairs_per_build": 20, "batches": 4},
}
SMALL_GG = {
    "experiment": "ggtest",
    "seed": 3,
    "params": {
        "source": {"type": "cascade", "r": 2, "zetas": [0.3, 0.6], "d": 20, "groups_per_measure": 100},
        "panel": {"n": [3], "p": [1], "functions": [{"kind": "spin_product", "F": [[1, 1], [1, 2]]}]},
        "measures": 200,
        "batches": 4,
        "negative_control": {"source": {"type": "two_atom"}, "measures": 2000},
    },
}


def _write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def test_cascade_normalization_record():
    rep = run(ExperimentConfig.from_dict(SMALL_CASCADE), workers=1)
    assert rep.metric("leaf_mass_normalization").passed
    assert all(m.seed == 7 and m.samples > 0 for m in rep.metrics)


def test_ggtest_defect_consistent_with_zero():
    rep = run(ExperimentConfig.from_dict(SMALL_GG), workers=1)
    m = rep.metric("gg[n=3,p=1,f=s1^1*s1^2]")
    assert m.passed and abs(m.estimate) <= m.tolerance
    assert rep.metric("negative_control_max_z").passed


def test_rerun_and_worker_count_are_bit_identical(tmp_path):
    cfg = ExperimentConfig.from_dict(SMALL_GG)
    a = emit(run(cfg, workers=1), tmp_path / "a", figures=False)
    b = emit(run(cfg, workers=2), tmp_path / "b", figures=False)
    for pa, pb in zip(a, b):
        if pa.suffix == ".csv":
            assert pa.read_bytes() == pb.read_bytes()


@pytest.mark.parametrize(
    "data",
    [
        {"experiment": "nope"},
        {"experiment": "cascade", "params": {"bogus": 1}},
        {"experiment": "cascade", "params": {"cascade": {"r": 2, "zetas": [0.6, 0.3], "d": 5}}},
        {"experiment": "cascade", "seed": -1},
        {"experiment": "tilt", "schema_version": "9"},
        {"experiment": "ggtest", "params": {"source": {"type": "two_atom", "w": 1.5}}},
        {"experiment": "theorem2", "params": {"b_vectors": [{"1": 3.0}]}},
        {"experiment": "ksat-concentration", "params": {"gamma": 0.6}},
        {"experiment": "ksat-concentration", "params": {"sandwich_N": [20]}},
    ],
)
def test_invalid_configs(data):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(data)


def test_empty_report_and_csv_roundtrip(tmp_path):
    rep = RunReport("tilt", {}, 0, [])
    paths = emit(rep, tmp_path)
    text = (tmp_path / "metrics.csv").read_text()
    assert text.splitlines()[0].startswith("schema_version,")
    assert len(text.splitlines()) == 1
    assert json.loads((tmp_path / "report.json").read_text())["schema_version"] == "1"
    assert {p.name for p in paths} == {"report.json", "metrics.csv"}
    body = csv_text(["a", "b"], [{"a": 'say "hi", ok', "b": 1.5}, {"a": "line\nbreak", "b": None}])
    rows = list(csv.DictReader(body.splitlines(keepends=True)))
    assert rows[0]["a"] == 'say "hi", ok' and rows[1]["a"] == "line\nbreak" and rows[1]["b"] == ""
    assert all(r["schema_version"] == "1" for r in rows)


def test_every_file_has_schema_version(tmp_path):
    rep = run(ExperimentConfig.from_dict({"experiment": "tilt", "params": {"pairs": 50, "stress_pairs": 50}}), workers=1)
    paths = emit(rep, tmp_path)
    for p in paths:
        if p.suffix == ".csv":
            assert p.read_text().startswith("schema_version,")
        elif p.suffix == ".json":
            assert "schema_version" in json.loads(p.read_text())
    assert any(p.suffix == ".png" for p in paths)


def test_output_resolution(monkeypatch):
    cfg = ExperimentConfig.from_dict({"experiment": "tilt", "output": "from_config"})
    monkeypatch.delenv(OUT_ENV, raising=False)
    assert resolve_output(None, cfg) == Path("from_config")
    monkeypatch.setenv(OUT_ENV, "from_env")
    assert resolve_output(None, cfg) == Path("from_env")
    assert resolve_output("from_cli", cfg) == Path("from_cli")


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(RunFailure):
        emit(RunReport("tilt", {}, 0, []), blocker / "sub")


def test_cli_exit_codes(tmp_path, capsys):
    good = _write(tmp_path, {"experiment": "tilt", "params": {"pairs": 20, "stress_pairs": 20}})
    assert main(["run", str(good), "--out", str(tmp_path / "out"), "--seed", "3", "--workers", "1"]) == 0
    out = capsys.readouterr().out
    assert "=== tilt seed=3" in out and "[PASS] group_law_residual" in out
    assert (tmp_path / "out" / "report.json").exists()
    bad = _write(tmp_path, {"experiment": "tilt", "params": {"pairs": 0}}, "bad.json")
    assert main(["run", str(bad)]) == 2
    assert main(["run", str(tmp_path / "missing.json")]) == 2
    (tmp_path / "blocker").write_text("x")
    assert main(["run", str(good), "--out", str(tmp_path / "blocker" / "x"), "--no-figures"]) == 3


def test_checked_in_configs_validate():
    names = sorted(p.name for p in CONFIGS.glob("c*.json"))
    assert len(names) == 10
    for p in CONFIGS.glob("c*.json"):
        ExperimentConfig.from_dict(json.loads(p.read_text()))

"""Experiment runner: config validation, batch scheduling over keyed random
streams, and report emission (JSON, CSV tables, figures).

A config is a JSON object::

    {"schema_version": "1", "experiment": "cascade", "seed": 7,
     "output": "results/cascade", "params": {...}}

Every experiment declares its parameter defaults; unknown keys are
rejected. Sampling happens in batches whose generators are
``stream(seed, experiment, tag, index)``, so the results do not depend on
how many worker processes evaluate them.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__

SCHEMA_VERSION = "1"
OUT_ENV = "RPCLAB_OUT"


class ConfigError(ValueError):
    """Invalid config or parameters (exit code 2)."""


class RunFailure(RuntimeError):
    """Failure while sampling or writing results (exit code 3)."""


# ------------------------------------------------------------------ records


@dataclass
class Metric:
    name: str
    estimate: float
    se: float | None = None
    tolerance: float | None = None
    passed: bool | None = None
    samples: int = 0
    seed: int = 0
    note: str = ""

    def row(self) -> dict:
        return {
            "name": self.name,
            "estimate": self.estimate,
            "se": self.se,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "samples": self.samples,
            "seed": self.seed,
            "note": self.note,
        }


@dataclass
class Table:
    """Long-format data: one row per observation, fixed columns."""

    name: str
    columns: list
    rows: list = field(default_factory=list)


@dataclass
class Figure:
    name: str
    draw: object  # callable(matplotlib Axes, dict of Table) -> None


@dataclass
class RunReport:
    experiment: str
    config: dict
    seed: int
    metrics: list
    tables: list = field(default_factory=list)
    figures: list = field(default_factory=list)
    wall_time: float = 0.0
    version: str = __version__

    @property
    def passed(self) -> bool:
        return all(m.passed is not False for m in self.metrics)

    def metric(self, name: str) -> Metric:
        for m in self.metrics:
            if m.name == name:
                return m
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "library_version": self.version,
            "experiment": self.experiment,
            "seed": self.seed,
            "config": self.config,
            "passed": self.passed,
            "wall_time_s": self.wall_time,
            "metrics": [m.row() for m in self.metrics],
            "tables": [t.name for t in self.tables],
            "figures": [f.name + ".png" for f in self.figures],
        }


# ------------------------------------------------------------------- config


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return data


def _merge(defaults: dict, given: dict) -> dict:
    """Top-level override of ``defaults``; nested objects are validated by their builders."""
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown parameter {key!r}")
        out[key] = value
    return out


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    params: dict
    output: str | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        from .experiments import EXPERIMENTS

        data = dict(data)
        version = str(data.pop("schema_version", SCHEMA_VERSION))
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r}")
        name = data.pop("experiment", None)
        if name not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
        seed = data.pop("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        output = data.pop("output", None)
        data.pop("description", None)
        params = data.pop("params", {})
        if data:
            raise ConfigError(f"unknown config keys {sorted(data)}")
        if not isinstance(params, dict):
            raise ConfigError("params must be an object")
        exp = EXPERIMENTS[name]
        merged = _merge(exp.defaults, params)
        try:
            exp.validate(merged)
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError, IndexError) as exc:
            raise ConfigError(f"invalid parameters for {name}: {exc}") from exc
        return cls(name, seed, merged, output)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "experiment": self.experiment, "seed": self.seed, "params": self.params}


# ---------------------------------------------------------------- execution


def default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


def map_batches(fn, tasks: list, workers: int) -> list:
    """``[fn(*t) for t in tasks]``, in task order, optionally across processes.

    ``fn`` must be a module-level function that derives its generator from
    its arguments, so the result is the same for any ``workers``.
    """
    if workers <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as ex:
        return list(ex.map(fn, *zip(*tasks)))


def run(config: ExperimentConfig, workers: int | None = None) -> RunReport:
    from .experiments import EXPERIMENTS

    workers = default_workers() if workers is None else int(workers)
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    exp = EXPERIMENTS[config.experiment]
    start = time.perf_counter()
    try:
        metrics, tables, figures = exp.run(config.params, config.seed, workers)
    except ConfigError:
        raise
    except Exception as exc:  # surfaced as a runtime failure with context
        raise RunFailure(f"{config.experiment} failed: {type(exc).__name__}: {exc}") from exc
    for m in metrics:
        m.seed = config.seed
        m.estimate = float(m.estimate)
        m.passed = None if m.passed is None else bool(m.passed)
    report = RunReport(config.experiment, config.to_dict(), config.seed, metrics, tables, figures)
    report.wall_time = time.perf_counter() - start
    return report


# --------------------------------------------------------------------- emit


def _cell(value):
    if hasattr(value, "item"):
        value = value.item()
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else str(value)
    return value


def csv_text(columns: list, rows: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["schema_version", *columns])
    for row in rows:
        writer.writerow([SCHEMA_VERSION, *(_cell(row[c]) for c in columns)])
    return buf.getvalue()


def _json_default(obj):
    try:
        return obj.item()  # numpy scalars
    except AttributeError:
        return str(obj)


def _json_clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _json_clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_clean(v) for v in obj]
    return obj


def resolve_output(cli_out: str | None, config: ExperimentConfig) -> Path:
    """``--out`` first, then the environment override, then the config, then ``results/<experiment>``."""
    for choice in (cli_out, os.environ.get(OUT_ENV), config.output):
        if choice:
            return Path(choice)
    return Path("results") / config.experiment


def emit(report: RunReport, out_dir, figures: bool = True) -> list:
    """Write ``report.json``, ``metrics.csv``, one CSV per table and the figures.

    Returns the written paths. IO problems raise :class:`RunFailure` naming the path.
    """
    out_dir = Path(out_dir)
    written = []

    def write(path: Path, text: str):
        try:
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise RunFailure(f"cannot write {path}: {exc}") from exc
        written.append(path)

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RunFailure(f"cannot create output directory {out_dir}: {exc}") from exc
    payload = json.loads(json.dumps(_json_clean(report.to_dict()), default=_json_default))
    write(out_dir / "report.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    cols = ["name", "estimate", "se", "tolerance", "passed", "samples", "seed", "note"]
    write(out_dir / "metrics.csv", csv_text(cols, [m.row() for m in report.metrics]))
    for table in report.tables:
        write(out_dir / f"{table.name}.csv", csv_text(table.columns, table.rows))
    if figures and report.figures:
        written.extend(_render(report, out_dir))
    return written


def _render(report: RunReport, out_dir: Path) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tables = {t.name: t for t in report.tables}
    paths = []
    for fig_spec in report.figures:
        fig, ax = plt.subplots(figsize=(6, 4))
        try:
            fig_spec.draw(ax, tables)
            fig.tight_layout()
            path = out_dir / f"{fig_spec.name}.png"
            fig.savefig(path, dpi=100, metadata={"Software": None})
            paths.append(path)
        except OSError as exc:
            raise RunFailure(f"cannot write figure {fig_spec.name}: {exc}") from exc
        except Exception as exc:
            raise RunFailure(f"cannot render figure {fig_spec.name}: {type(exc).__name__}: {exc}") from exc
        finally:
            plt.close(fig)
    return paths


def format_summary(report: RunReport) -> str:
    """Delimited plain-text summary, one line per metric."""
    lines = [f"=== {report.experiment} seed={report.seed} time={report.wall_time:.1f}s ==="]
    for m in report.metrics:
        status = {True: "PASS", False: "FAIL", None: "info"}[m.passed]
        se = "" if m.se is None else f" se={m.se:.3g}"
        tol = "" if m.tolerance is None else f" tol={m.tolerance:.3g}"
        lines.append(f"[{status}] {m.name}: {m.estimate:.6g}{se}{tol}")
    lines.append(f"=== {'PASS' if report.passed else 'FAIL'} ===")
    return "\n".join(lines)

"""Config-driven runs, comparisons and sweeps.

A run writes into its output directory only:

* ``rounds.csv``  per-round, per-client training metrics
* ``audit.csv``   every upload's filter decision
* ``eval.csv``    threshold sweep and OOD statistics (long format)
* ``summary.json`` headline numbers, the fully resolved config and the version

Each CSV starts with a ``#schema=<name>/<version>`` line.  Nothing
time-dependent is recorded, so identical configs give identical bytes.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, apply_overrides, validate
from .data import LabeledDataset, PartitionSpec, dirichlet_partition, load_delimited, make_blobs, make_ood
from .federation import RoundReport, TrainingResult, evaluation_inputs, run_training
from .inference import EvalReport, evaluate
from .server import FilterConfig
from .special import RngStream

__all__ = [
    "SCHEMAS",
    "OUTPUT_ROOT_ENV",
    "Scenario",
    "RunOutcome",
    "build_scenario",
    "execute",
    "run_experiment",
    "compare_runs",
    "parse_grid",
    "run_sweep",
]

SCHEMAS = {"rounds": 1, "audit": 1, "eval": 1, "summary": 1, "compare": 1, "sweep": 1}
OUTPUT_ROOT_ENV = "SUBJFED_OUTPUT_ROOT"

ROUND_COLUMNS = [
    "round", "client_id", "role", "participant", "diverged", "accuracy",
    "loss_total", "ce", "cor", "inc", "evi", "neg",
]
AUDIT_COLUMNS = ["round", "client_id", "role", "decision", "stage", "reason", "model_uncertainty"]
EVAL_COLUMNS = ["section", "client_id", "threshold", "metric", "value"]

SECURITY_GRID = {
    "attack.kind": ["random", "lie", "mpaf", "label_flip", "stat_opt"],
    "attack.malicious_ratio": [0.1, 0.2, 0.3, 0.4, 0.5],
}


@dataclass
class Scenario:
    data: LabeledDataset
    shards: list[LabeledDataset]
    holdout: np.ndarray
    ood: np.ndarray


@dataclass
class RunOutcome:
    config: ExperimentConfig
    training: TrainingResult
    evaluation: EvalReport
    summary: dict[str, Any]


def build_scenario(cfg: ExperimentConfig) -> Scenario:
    ds = cfg.dataset
    if ds.kind == "blobs":
        data = make_blobs(
            ds.classes, ds.per_class, ds.dim, ds.spread, RngStream.for_purpose(cfg.seed, "dataset"), ds.radius
        )
    else:
        data = load_delimited(ds.path, ds.label_column, None, ds.delimiter, ds.header)
    shards = dirichlet_partition(
        data, PartitionSpec(cfg.partition.num_clients, cfg.partition.beta, cfg.partition_seed)
    )
    holdout = make_ood(cfg.evaluation.holdout_size, data.dim, data, RngStream.for_purpose(cfg.seed, "holdout"))
    ood = make_ood(cfg.evaluation.ood_size, data.dim, data, RngStream.for_purpose(cfg.seed, "ood-eval"))
    return Scenario(data, shards, holdout, ood)


def filter_config(cfg: ExperimentConfig, holdout: np.ndarray) -> FilterConfig:
    d = cfg.defense
    return FilterConfig(
        holdout,
        evidence_cap=d.evidence_cap,
        similarity_tau=d.similarity_tau,
        min_cluster=d.min_cluster,
        overflow_enabled=d.overflow,
        similarity_enabled=d.similarity,
    )


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return "nan" if math.isnan(v) else repr(v)
    return str(value)


class _CsvSink:
    def __init__(self, path: Path, schema: str, columns: list[str]):
        self._fh = path.open("w", newline="", encoding="utf-8")
        self._fh.write(f"#schema={schema}/{SCHEMAS[schema]}\n")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(columns)

    def rows(self, rows: Iterable[Sequence]) -> None:
        for row in rows:
            self._writer.writerow([_fmt(v) for v in row])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _round_rows(report: RoundReport) -> list[list]:
    rows = []
    for cid in sorted(set(report.accuracy) | set(report.losses) | set(report.malicious) | set(report.participants)):
        loss = report.losses.get(cid)
        rows.append(
            [
                report.round,
                cid,
                "malicious" if cid in report.malicious else "honest",
                cid in report.participants,
                cid in report.diverged,
                report.accuracy.get(cid),
                *(
                    [loss.total, loss.ce, loss.cor, loss.inc, loss.evi, loss.neg]
                    if loss is not None
                    else [None] * 6
                ),
            ]
        )
    return rows


def _audit_rows(report: RoundReport) -> list[list]:
    audit = report.audit
    rejected = {r.client_id: r for r in audit.rejections}
    rows = []
    for cid in report.participants:
        role = "malicious" if cid in report.malicious else "honest"
        u = audit.model_uncertainty.get(cid)
        if cid in rejected:
            r = rejected[cid]
            rows.append([report.round, cid, role, "rejected", r.stage, r.reason, u])
        else:
            rows.append([report.round, cid, role, "kept", "", "", u])
    return rows


def _eval_rows(report: EvalReport) -> list[list]:
    rows = []
    for c in report.clients:
        for t in report.thresholds:
            rows.append(["client", c.client_id, t, "accuracy", c.accuracy[t]])
            rows.append(["client", c.client_id, t, "coverage", c.coverage[t]])
            rows.append(["client", c.client_id, t, "accepted", c.accepted[t]])
    for t in report.thresholds:
        rows.append(["overall", "mean", t, "accuracy", report.mean_accuracy[t]])
        rows.append(["overall", "pooled", t, "accuracy", report.pooled_accuracy[t]])
        rows.append(["overall", "mean", t, "coverage", report.mean_coverage[t]])
    rows.append(["ood", "pooled", None, "auroc", report.auroc])
    rows.append(["ood", "pooled", None, "median_uncertainty_in", float(np.median(report.in_uncertainty))])
    rows.append(["ood", "pooled", None, "median_uncertainty_ood", float(np.median(report.ood_uncertainty))])
    h_in, h_ood = report.histograms()
    edges = report.histogram_edges
    for i, (a, b) in enumerate(zip(h_in, h_ood)):
        rows.append(["histogram_in", f"bin{i}", edges[i + 1], "count", int(a)])
        rows.append(["histogram_ood", f"bin{i}", edges[i + 1], "count", int(b)])
    return rows


def _clean(value):
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return None if math.isnan(v) or math.isinf(v) else v
    if isinstance(value, np.integer):
        return int(value)
    return value


def _summary(cfg: ExperimentConfig, result: TrainingResult, report: EvalReport) -> dict:
    counts = {"benign_uploads": 0, "benign_rejected": 0, "malicious_uploads": 0, "malicious_rejected": 0}
    stages: dict[str, int] = {}
    diverged = 0
    for r in result.reports:
        rejected = r.audit.rejected_ids
        diverged += len(r.diverged)
        for rej in r.audit.rejections:
            stages[rej.stage] = stages.get(rej.stage, 0) + 1
        for cid in r.participants:
            role = "malicious" if cid in r.malicious else "benign"
            counts[f"{role}_uploads"] += 1
            counts[f"{role}_rejected"] += cid in rejected
    last = result.reports[-1].mean_accuracy if result.reports else None
    results = {
        "final_round_accuracy": last,
        "accuracy": {str(t): report.pooled_accuracy[t] for t in report.thresholds},
        "mean_client_accuracy": {str(t): report.mean_accuracy[t] for t in report.thresholds},
        "coverage": {str(t): report.mean_coverage[t] for t in report.thresholds},
        "auroc": report.auroc,
        "rejections_by_stage": dict(sorted(stages.items())),
        **counts,
        "diverged_updates": diverged,
        "invalid_predictions": report.invalid_predictions,
        "evaluated_clients": len(report.clients),
    }
    return _clean(
        {
            "artifact_version": __version__,
            "schema": SCHEMAS,
            "seed": cfg.seed,
            "config": cfg.resolved(),
            "results": results,
        }
    )


def execute(cfg: ExperimentConfig, out_dir: Path | None = None) -> RunOutcome:
    """Run one experiment; writes the output files when ``out_dir`` is given."""
    scenario = build_scenario(cfg)
    fed = cfg.federation_config()
    filters = filter_config(cfg, scenario.holdout) if fed.defense.rule == "tpfl" else None

    sinks = {}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        sinks["rounds"] = _CsvSink(out_dir / "rounds.csv", "rounds", ROUND_COLUMNS)
        sinks["audit"] = _CsvSink(out_dir / "audit.csv", "audit", AUDIT_COLUMNS)

    def on_round(report: RoundReport) -> None:
        if sinks:
            sinks["rounds"].rows(_round_rows(report))
            sinks["audit"].rows(_audit_rows(report))

    try:
        result = run_training(scenario.shards, scenario.holdout, fed, filters, on_round=on_round)
    finally:
        for sink in sinks.values():
            sink.close()

    ids, ensembles, tests = evaluation_inputs(result)
    report = evaluate(ensembles, tests, cfg.evaluation.thresholds, scenario.ood, ids)
    summary = _summary(cfg, result, report)
    if out_dir is not None:
        sink = _CsvSink(out_dir / "eval.csv", "eval", EVAL_COLUMNS)
        sink.rows(_eval_rows(report))
        sink.close()
        _write_json(out_dir / "summary.json", summary)
    return RunOutcome(cfg, result, report, summary)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def default_output_dir(cfg: ExperimentConfig, config_path: str | Path | None = None) -> Path:
    if cfg.output_dir:
        return Path(cfg.output_dir)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    stem = Path(config_path).stem if config_path else "experiment"
    return root / f"{stem}-seed{cfg.seed}"


def run_experiment(cfg: ExperimentConfig, out_dir: Path) -> int:
    """Run and persist; returns 0, or 2 after writing ``error.json``."""
    out_dir = Path(out_dir)
    try:
        execute(cfg, out_dir)
    except Exception as err:  # reported, not swallowed: exit status 2 plus a file
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_json(
            out_dir / "error.json",
            {"error": type(err).__name__, "message": str(err), "artifact_version": __version__},
        )
        return 2
    return 0


# --- comparison -----------------------------------------------------------------


def _flatten(prefix: str, value, out: dict) -> None:
    if isinstance(value, dict):
        for k in sorted(value):
            _flatten(f"{prefix}.{k}" if prefix else str(k), value[k], out)
    else:
        out[prefix] = value


def compare_runs(summary_paths: Sequence[str | Path], out_path: str | Path | None = None) -> list[list[str]]:
    """Align the ``results`` block of several summaries into one table.

    Columns: metric, one value column per run, then ``diff_<i>`` columns
    holding run i minus the first run for numeric metrics.
    """
    if not summary_paths:
        raise ValueError("nothing to compare")
    summaries = [json.loads(Path(p).read_text(encoding="utf-8")) for p in summary_paths]
    for p, s in zip(summary_paths, summaries):
        if "results" not in s or s.get("schema", {}).get("summary") != SCHEMAS["summary"]:
            raise ConfigError([(str(p), "incompatible summary schema")])
    flat = []
    for s in summaries:
        f: dict = {}
        _flatten("", s["results"], f)
        flat.append(f)
    keys = sorted(set().union(*flat))
    names = [_run_name(p, i) for i, p in enumerate(summary_paths)]
    header = ["metric", *names, *(f"diff_{n}" for n in names[1:])]
    rows = [header]
    for key in keys:
        values = [f.get(key) for f in flat]
        diffs = []
        for v in values[1:]:
            if _numeric(v) and _numeric(values[0]):
                diffs.append(_fmt(float(v) - float(values[0])))
            else:
                diffs.append("")
        rows.append([key, *(_fmt(v) for v in values), *diffs])
    if out_path is not None:
        with Path(out_path).open("w", newline="", encoding="utf-8") as fh:
            fh.write(f"#schema=compare/{SCHEMAS['compare']}\n")
            csv.writer(fh, lineterminator="\n").writerows(rows)
    return rows


def _numeric(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _run_name(path, index: int) -> str:
    parent = Path(path).parent.name
    return f"{index}:{parent}" if parent else str(index)


# --- sweeps ---------------------------------------------------------------------


def parse_grid(spec: str) -> dict[str, list]:
    """``security`` or ``key=v1,v2;key2=v3`` with YAML-parsed values."""
    import yaml

    spec = spec.strip()
    if spec == "security":
        return {k: list(v) for k, v in SECURITY_GRID.items()}
    grid: dict[str, list] = {}
    problems = []
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        key, sep, values = part.partition("=")
        if not sep or not key.strip() or not values.strip():
            problems.append((part, "grid entries look like key=v1,v2"))
            continue
        grid[key.strip()] = [yaml.safe_load(v.strip()) for v in values.split(",")]
    if problems or not grid:
        raise ConfigError(problems or [(spec, "empty grid")])
    return grid


def run_sweep(raw: dict, grid: dict[str, list], out_root: Path) -> tuple[int, list[dict]]:
    """Run the cartesian product of ``grid`` over the raw config.

    Every cell is validated before any runs.  Each cell owns
    ``out_root/cell-NNN``; ``out_root/sweep.csv`` gets one row per cell.
    """
    keys = list(grid)
    cells = []
    problems = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        overrides = [f"{k}={json.dumps(v)}" for k, v in zip(keys, combo)]
        try:
            cells.append((combo, validate(apply_overrides(raw, overrides))))
        except ConfigError as err:
            problems += [(f"{dict(zip(keys, combo))} {p}", m) for p, m in err.problems]
    if problems:
        raise ConfigError(problems)

    out_root.mkdir(parents=True, exist_ok=True)
    status = 0
    rows = []
    for i, (combo, cfg) in enumerate(cells):
        cell_dir = out_root / f"cell-{i:03d}"
        code = run_experiment(cfg.model_copy(update={"output_dir": str(cell_dir)}), cell_dir)
        status = max(status, code)
        row = {"cell": i, **{k: v for k, v in zip(keys, combo)}, "status": code}
        summary_path = cell_dir / "summary.json"
        if code == 0 and summary_path.exists():
            res = json.loads(summary_path.read_text(encoding="utf-8"))["results"]
            thresholds = list(res["accuracy"])
            for t in thresholds:
                row[f"accuracy@{t}"] = res["accuracy"][t]
                row[f"coverage@{t}"] = res["coverage"][t]
            row["auroc"] = res["auroc"]
            row["malicious_rejected"] = res["malicious_rejected"]
            row["benign_rejected"] = res["benign_rejected"]
        rows.append(row)

    columns = []
    for row in rows:
        for k in row:
            if k not in columns:
                columns.append(k)
    with (out_root / "sweep.csv").open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"#schema=sweep/{SCHEMAS['sweep']}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])
    return status, rows

"""CSV reports over the metrics databases of one or more run directories."""

import csv
import io
import logging
import os
from collections import defaultdict

import numpy as np
from sqlalchemy.orm import Session

from models import TrainingRun, VALID_METRIC_SPLITS, session_for
from app.config import RUNTIME_CONFIG

logger = logging.getLogger(__name__)

RUN_COLUMNS = ["run_id", "name", "sampling_mode", "propagation_mode", "R", "K", "total_steps", "seed"]
CURVE_HEADERS = RUN_COLUMNS + ["epoch", "split", "rmse", "params", "flops"]
FINAL_HEADERS = RUN_COLUMNS + ["status", "best_epoch", "best_val_rmse", "test_rmse", "params", "flops"]
SUMMARY_HEADERS = ["name", "sampling_mode", "propagation_mode", "R", "K", "total_steps",
                   "seeds", "median_test_rmse", "min_test_rmse", "max_test_rmse", "params", "flops"]


def _csv_string(rows: list[list], headers: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(headers)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def find_databases(runs_dir) -> list[str]:
    """Every metrics database under runs_dir, in sorted path order."""
    name = RUNTIME_CONFIG["database_name"]
    found = []
    for root, dirs, files in os.walk(str(runs_dir)):
        dirs.sort()
        if name in files:
            found.append(root)
    return sorted(found)


def _run_fields(run: TrainingRun) -> list:
    return [run.run_id, run.name, run.sampling_mode, run.propagation_mode, run.R, run.K,
            _fmt(run.total_steps), run.seed]


def collect_runs(db: Session) -> list[TrainingRun]:
    return db.query(TrainingRun).order_by(TrainingRun.run_id).all()


def curve_rows(runs: list[TrainingRun]) -> list[list]:
    split_order = {split: i for i, split in enumerate(VALID_METRIC_SPLITS)}
    rows = []
    for run in runs:
        metrics = sorted(run.metrics, key=lambda m: (m.epoch, split_order.get(m.split, 99)))
        for metric in metrics:
            rows.append(_run_fields(run) + [metric.epoch, metric.split, _fmt(metric.rmse),
                                            _fmt(run.params), _fmt(run.flops)])
    return rows


def final_rows(runs: list[TrainingRun]) -> list[list]:
    return [_run_fields(run) + [run.status, _fmt(run.best_epoch), _fmt(run.best_val_rmse),
                                _fmt(run.test_rmse), _fmt(run.params), _fmt(run.flops)]
            for run in runs]


def summary_rows(runs: list[TrainingRun]) -> list[list]:
    """One row per configuration: test RMSE median/min/max over its seeds."""
    groups = defaultdict(list)
    for run in runs:
        key = (run.name, run.sampling_mode, run.propagation_mode, run.R, run.K, run.total_steps)
        groups[key].append(run)
    rows = []
    for key in sorted(groups, key=lambda k: tuple(str(v) for v in k)):
        members = groups[key]
        tests = [r.test_rmse for r in members if r.test_rmse is not None]
        stats = [float(np.median(tests)), min(tests), max(tests)] if tests else [None, None, None]
        rows.append([*key[:5], _fmt(key[5]), len(members)] + [_fmt(v) for v in stats]
                    + [_fmt(members[0].params), _fmt(members[0].flops)])
    return rows


def report(runs_dir, csv_path) -> dict:
    """Write <csv_path> (per-epoch curves), <stem>_final.csv and <stem>_summary.csv.

    An empty or missing runs directory still produces header-only files.
    """
    runs = []
    sessions = []
    try:
        for directory in find_databases(runs_dir):
            db = session_for(directory)
            sessions.append(db)
            runs.extend(collect_runs(db))
        runs.sort(key=lambda r: r.run_id)

        csv_path = str(csv_path)
        stem, _ = os.path.splitext(csv_path)
        outputs = {
            "curves": (csv_path, _csv_string(curve_rows(runs), CURVE_HEADERS)),
            "final": (f"{stem}_final.csv", _csv_string(final_rows(runs), FINAL_HEADERS)),
            "summary": (f"{stem}_summary.csv", _csv_string(summary_rows(runs), SUMMARY_HEADERS)),
        }
    finally:
        for db in sessions:
            db.close()

    parent = os.path.dirname(os.path.abspath(csv_path))
    os.makedirs(parent, exist_ok=True)
    for path, text in outputs.values():
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    logger.info(f"Report: {len(runs)} runs -> {csv_path}")
    return {name: path for name, (path, _) in outputs.items()} | {"runs": len(runs)}

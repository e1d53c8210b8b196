"""Cluster-size / weighting / shifting ablation grid.

Every run trains one single-modality cluster model from the same seed and
reports best-epoch and final-epoch accuracy. Runs are independent, so they
may execute in parallel worker processes; results are always written in grid
order regardless of completion order.
"""

import csv
import logging
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor

from .clusters import ClusterConfig
from .errors import ConfigError
from .training import train_cluster

logger = logging.getLogger(__name__)

TABLE_SIZES = (1, 2, 4, 8, 16, 32, 64, 128)
RESULT_COLUMNS = ("weighting", "N", "shifting", "top1", "top5", "epochs", "wallclock_s", "seed", "best_epoch", "final_top1")
CURVE_COLUMNS = ("epoch", "train_acc", "test_acc", "loss")


def grid_runs(sizes=TABLE_SIZES, weightings=("average", "fc1", "fc2")):
    """(weighting, N, shifting) triples. Average appears once per N, without
    shifting: it is the replicated-mean baseline, whose units are identical."""
    runs = []
    for n in sizes:
        for w in weightings:
            modes = (False,) if w == "average" else (False, True)
            runs.extend((w, int(n), s) for s in modes)
    return runs


def run_name(weighting, n_units, shifting):
    return f"{weighting}_N{n_units}_{'shift' if shifting else 'noshift'}"


def run_one(run, train_caches, test_caches, train_cfg, column_split=None):
    weighting, n_units, shifting = run
    dims = [c.dim for c in train_caches] if column_split is None else list(column_split)
    cluster_cfgs = [ClusterConfig(weighting, n_units, shifting, dim=d) for d in dims]
    started = time.perf_counter()
    best, final = train_cluster(train_caches, train_cfg, cluster_cfgs, test_caches, column_split)
    elapsed = time.perf_counter() - started
    history = final.history
    best_record = history[best.epoch - 1] if best.epoch else {}
    row = {
        "weighting": weighting,
        "N": n_units,
        "shifting": "on" if shifting else "off",
        "top1": 100.0 * best_record.get("test_acc", 0.0),
        "top5": 100.0 * best_record.get("test_top5", 0.0),
        "epochs": train_cfg.epochs,
        "wallclock_s": elapsed,
        "seed": train_cfg.seed,
        "best_epoch": best.epoch,
        "final_top1": 100.0 * (history[-1].get("test_acc", 0.0) if history else 0.0),
    }
    curve = [{k: r.get(k, 0.0) for k in CURVE_COLUMNS} for r in history]
    return row, curve, best


# caches are handed to forked workers through this module-level slot rather
# than pickled once per task
_SHARED = {}


def _worker(run):
    s = _SHARED
    row, curve, _ = run_one(run, s["train"], s["test"], s["cfg"], s["split"])
    return row, curve


def ablation_grid(train_caches, test_caches, train_cfg, sizes=TABLE_SIZES, weightings=("average", "fc1", "fc2"),
                  jobs=1, out_dir=None, column_split=None, progress=None):
    """Train every grid configuration; returns ``(rows, curves)`` in grid order.

    With ``out_dir`` the results table, the accuracy pivot and one curve
    CSV per run are written there.
    """
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    runs = grid_runs(sizes, weightings)
    results = {}
    if jobs == 1 or len(runs) == 1:
        for run in runs:
            row, curve, _ = run_one(run, train_caches, test_caches, train_cfg, column_split)
            results[run] = (row, curve)
            if progress:
                progress(row)
    else:
        _SHARED.update(train=train_caches, test=test_caches, cfg=train_cfg, split=column_split)
        try:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
                for run, (row, curve) in zip(runs, pool.map(_worker, runs)):
                    results[run] = (row, curve)
                    if progress:
                        progress(row)
        finally:
            _SHARED.clear()
    rows = [results[r][0] for r in runs]
    curves = {run_name(*r): results[r][1] for r in runs}
    if out_dir is not None:
        write_outputs(out_dir, rows, curves)
    return rows, curves


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def _fmt(value):
    return f"{value:.4f}" if isinstance(value, float) else str(value)


def write_results(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in RESULT_COLUMNS])


def read_results(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["N"] = int(row["N"])
        for key in ("top1", "top5", "wallclock_s", "final_top1"):
            row[key] = float(row[key])
        for key in ("epochs", "seed", "best_epoch"):
            row[key] = int(row[key])
    return rows


def write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for record in curve:
            writer.writerow([_fmt(record[c]) if c != "epoch" else str(record[c]) for c in CURVE_COLUMNS])


def write_table(path, rows):
    """Accuracy pivot: one line per N, one column per (weighting, shifting)
    variant, best-epoch top-1 in percent."""
    columns = []
    for row in rows:
        key = (row["weighting"], row["shifting"])
        if key not in columns:
            columns.append(key)
    by_n = {}
    for row in rows:
        by_n.setdefault(row["N"], {})[(row["weighting"], row["shifting"])] = row["top1"]
    header = ["N"] + [w if w == "average" else f"{w}_{'w' if s == 'on' else 'wo'}_shift" for w, s in columns]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for n in sorted(by_n):
            writer.writerow([n] + [f"{by_n[n][c]:.1f}" if c in by_n[n] else "" for c in columns])


def write_outputs(out_dir, rows, curves):
    os.makedirs(os.path.join(out_dir, "curves"), exist_ok=True)
    write_results(os.path.join(out_dir, "results.csv"), rows)
    write_table(os.path.join(out_dir, "table1.csv"), rows)
    for name, curve in curves.items():
        write_curve(os.path.join(out_dir, "curves", f"{name}.csv"), curve)

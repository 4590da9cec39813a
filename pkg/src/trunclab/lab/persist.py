"""Run persistence and figure/CSV emission.

File naming inside an output directory:

    {task}_{rule}_seed{seed}.json          run record (config, rows, final block)
    {task}_{rule}_seed{seed}.params.json   final parameters of completed runs
    {task}_{rule}_seed{seed}.csv           one row per evaluation, columns ROW_COLUMNS
    summary.json                           sweep summary
    lambda1_curves.svg                     lambda1 vs iteration, mean +- std per rule
    gap_hist.svg                           generalization-gap histogram per rule
    gap_vs_lambda1.svg                     final gap against final lambda1

Non-finite floats are written as JSON ``null`` and empty CSV cells, and read
back as NaN.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np

from ..core import NetworkParams

ROW_COLUMNS = ("iter", "lr", "train_loss", "train_metric", "test_metric", "lambda1", "lambda1_iters",
               "rho", "g_norm", "e_norm", "align_g", "align_e")
INT_COLUMNS = ("iter", "lambda1_iters")


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, (np.floating,)):
        return _clean(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _out(out_dir) -> Path:
    p = Path(out_dir)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {p}: {exc}") from exc
    return p


def dump_json(obj, path):
    Path(path).write_text(json.dumps(_clean(obj), indent=1, allow_nan=False) + "\n")


def _rows_from_json(rows):
    return [{k: (math.nan if v is None and k not in INT_COLUMNS else v) for k, v in r.items()} for r in rows]


def save_record(rec, out_dir) -> Path:
    path = _out(out_dir) / f"{rec.run_id}.json"
    dump_json(rec.to_dict(), path)
    return path


def load_record(path):
    from .runner import RunRecord
    d = json.loads(Path(path).read_text())
    d["rows"] = _rows_from_json(d["rows"])
    return RunRecord.from_dict(d)


def load_records(out_dir) -> list:
    return [load_record(p) for p in sorted(Path(out_dir).glob("*.json"))
            if not p.name.endswith(".params.json") and p.name != "summary.json"]


def save_params(params: NetworkParams, path):
    dump_json(params.to_dict(), path)


def load_params(path) -> NetworkParams:
    return NetworkParams.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# CSV traces
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    return repr(v) if math.isfinite(v) else ""


def write_trace_csv(rec, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROW_COLUMNS)
        for r in rec.rows:
            w.writerow([_fmt(r[c]) for c in ROW_COLUMNS])


def read_trace_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = {}
            for c in ROW_COLUMNS:
                s = raw[c]
                row[c] = int(s) if c in INT_COLUMNS else (float(s) if s != "" else math.nan)
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "trunclab"
    return plt


def _save_svg(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def _legend(ax):
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=7)


def _by_rule(records):
    out = {}
    for r in records:
        out.setdefault(r.rule, []).append(r)
    return dict(sorted(out.items()))


def plot_lambda_curves(records, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for rule, rs in _by_rule(records).items():
        rs = [r for r in rs if r.rows]
        if not rs:
            continue
        n = min(len(r.rows) for r in rs)
        it = np.array([row["iter"] for row in rs[0].rows[:n]])
        lam = np.array([[row["lambda1"] for row in r.rows[:n]] for r in rs])
        mu, sd = lam.mean(0), lam.std(0)
        ax.plot(it, mu, label=rule)
        ax.fill_between(it, mu - sd, mu + sd, alpha=0.25)
    ax.set_xlabel("iteration")
    ax.set_ylabel("leading Hessian eigenvalue")
    _legend(ax)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def plot_gap_hist(records, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for rule, rs in _by_rule(records).items():
        gaps = [r.final["gap"] for r in rs if r.completed]
        if gaps:
            ax.hist(gaps, bins=10, alpha=0.5, label=rule)
            ax.axvline(np.mean(gaps), ls="--", lw=1)
    ax.set_xlabel("generalization gap")
    ax.set_ylabel("runs")
    _legend(ax)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def plot_gap_scatter(records, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for rule, rs in _by_rule(records).items():
        done = [r for r in rs if r.completed]
        if done:
            ax.scatter([r.final["lambda1"] for r in done], [r.final["gap"] for r in done], s=12, label=rule)
    ax.set_xscale("symlog")
    ax.set_xlabel("final leading Hessian eigenvalue")
    ax.set_ylabel("generalization gap")
    _legend(ax)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def emit_outputs(records: Sequence, out_dir, formats: Iterable[str] = ("csv", "svg")) -> List[Path]:
    """Per-run CSV traces and aggregate SVG figures; returns the written paths."""
    if not records:
        raise ValueError("no records to emit")
    formats = set(formats)
    unknown = formats - {"csv", "svg"}
    if unknown:
        raise ValueError(f"unknown output formats {sorted(unknown)}")
    out = _out(out_dir)
    paths = []
    if "csv" in formats:
        for rec in records:
            p = out / f"{rec.run_id}.csv"
            write_trace_csv(rec, p)
            paths.append(p)
    if "svg" in formats:
        for name, fn in (("lambda1_curves.svg", plot_lambda_curves), ("gap_hist.svg", plot_gap_hist),
                         ("gap_vs_lambda1.svg", plot_gap_scatter)):
            fn(records, out / name)
            paths.append(out / name)
    return paths

"""Evaluation of a trained model and metric report files."""

from __future__ import annotations

import csv
import math
import os

import numpy as np

from .errors import InputError
from .metrics import TABLE_COLUMNS, acc_f1_prec, box_rmse, center_errors, trajectory_metrics
from .objective import predict


def select_split(dataset, split):
    if split in (None, "all"):
        samples = list(dataset)
    else:
        samples = dataset.split(split)
    if not samples:
        raise InputError(f"split {split!r} is empty")
    return samples


def evaluate(model, dataset, split="test", return_predictions=False):
    """Metrics of fused predictions on ``split``; keys follow TABLE_COLUMNS."""
    samples = select_split(dataset, split)
    pred = predict(model, dataset, samples)
    truth = np.stack([s.future_boxes for s in samples])
    labels = np.array([s.crossing for s in samples])
    report = trajectory_metrics(pred["boxes"], truth)
    report.update(acc_f1_prec(pred["action"], labels))
    if return_predictions:
        return report, {"samples": samples, "truth": truth, "labels": labels, **pred}
    return report


def summarize_runs(reports):
    """Mean and standard deviation (population) of each table column over runs."""
    out = {}
    for col in TABLE_COLUMNS:
        vals = np.array([r[col] for r in reports], dtype=np.float64)
        out[col] = (float(vals.mean()), float(vals.std()))
    return out


def _num(v):
    return "nan" if math.isnan(v) else f"{v:.6f}"


def report_rows(reports, labels=None):
    """Rows of strings: one per run, plus mean/std rows for several runs."""
    labels = labels or [f"seed{i}" for i in range(len(reports))]
    rows = [[lab] + [_num(r[c]) for c in TABLE_COLUMNS] for lab, r in zip(labels, reports)]
    if len(reports) > 1:
        agg = summarize_runs(reports)
        rows.append(["mean"] + [_num(agg[c][0]) for c in TABLE_COLUMNS])
        rows.append(["std"] + [_num(agg[c][1]) for c in TABLE_COLUMNS])
    return rows


def format_table(rows, header=("run",) + TABLE_COLUMNS):
    table = [list(header)] + rows
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(r, widths)))
             for r in table]
    return "\n".join(line.rstrip() for line in lines) + "\n"


def write_report(out_dir, reports, labels=None):
    """Write metrics.csv (columns ADE..Prec, one row per run) and metrics.txt."""
    os.makedirs(out_dir, exist_ok=True)
    rows = report_rows(reports, labels)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("run",) + TABLE_COLUMNS)
        w.writerows(rows)
    with open(os.path.join(out_dir, "metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_table(rows))
    return rows


def write_errors(path, predictions):
    """Per-sample debugging table: center and box errors plus the crossing score."""
    ce = center_errors(predictions["boxes"], predictions["truth"])
    be = box_rmse(predictions["boxes"], predictions["truth"])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("sample", "ADE", "FDE", "ARB", "FRB", "score", "label"))
        for i, s in enumerate(predictions["samples"]):
            w.writerow((s.sample_id, _num(ce[i].mean()), _num(ce[i, -1]), _num(be[i].mean()),
                        _num(be[i, -1]), _num(float(predictions["action"][i])), int(predictions["labels"][i])))

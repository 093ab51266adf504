"""Named ablation rows and the sweep runner behind ``biped ablate``."""

from __future__ import annotations

import csv
import itertools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import BiPedConfig, coerce
from .errors import ConfigError
from .eval import evaluate, format_table
from .metrics import TABLE_COLUMNS
from .model import BiPedModel
from .objective import LossWeights, TrainSchedule, fit

TOGGLE_KEYS = (
    "use_mie", "use_mje", "use_mip", "use_mjp", "use_cim", "use_iau",
    "cim_categorical", "use_grid_task", "grid_cell", "ego_future_mode",
)

# encoder / decoder combinations
TABLE2 = (
    ("MIE+MIP", {"use_mje": False, "use_mjp": False}),
    ("MIE+MJP", {"use_mje": False, "use_mip": False}),
    ("MJE+MIP", {"use_mie": False, "use_mjp": False}),
    ("MJE+MJP", {"use_mie": False, "use_mip": False}),
    ("MIE+MJP+MIP", {"use_mje": False}),
    ("All", {}),
)
# interaction encoding (the Conv2D/Conv3D-only rows are out of scope)
TABLE3 = (
    ("No CIM", {"use_cim": False}),
    ("Single Hybrid", {"cim_categorical": False, "use_iau": False}),
    ("Categorical Hybrid", {"use_iau": False}),
    ("Categorical Hybrid+IAU", {}),
)
# auxiliary grid task
TABLE4 = (
    ("No grid", {"use_grid_task": False}),
    ("GC-15", {"grid_cell": 15}),
    ("GC-30", {"grid_cell": 30}),
    ("GC-60", {"grid_cell": 60}),
    ("GC-120", {"grid_cell": 120}),
)
TABLES = {"2": TABLE2, "3": TABLE3, "4": TABLE4}
TRAJECTORY_ONLY = ("ADE", "FDE", "ARB", "FRB")


def parse_toggles(specs):
    """['use_mie=true,false', 'grid_cell=30,none'] -> named override rows (cartesian product)."""
    types = {f.name: f.type for f in BiPedConfig.__dataclass_fields__.values()}
    axes = []
    for spec in specs:
        key, sep, values = spec.partition("=")
        key = key.strip()
        if not sep or not values.strip():
            raise ConfigError(f"toggle {spec!r} must look like key=v1,v2")
        if key not in TOGGLE_KEYS:
            raise ConfigError(f"unknown toggle {key!r}; valid keys: {', '.join(TOGGLE_KEYS)}")
        options = []
        for raw in values.split(","):
            raw = raw.strip()
            if key == "grid_cell" and raw.lower() == "none":
                options.append((f"{key}=none", {"use_grid_task": False}))
            else:
                options.append((f"{key}={raw}", {key: coerce(types[key], key, raw)}))
        axes.append(options)
    rows = []
    for combo in itertools.product(*axes):
        name = ";".join(label for label, _ in combo)
        overrides = {}
        for _, o in combo:
            overrides.update(o)
        rows.append((name, overrides))
    return rows


def build_rows(base, rows):
    """Validate every row's config up front so a sweep never dies halfway."""
    out = []
    for name, overrides in rows:
        try:
            out.append((name, base.replace(**overrides)))
        except ConfigError as exc:
            raise ConfigError(f"ablation row {name!r}: {exc}") from None
    return out


@dataclass
class AblationResult:
    name: str
    seed: int
    n_params: int
    metrics: dict = field(default_factory=dict)


def _run_one(job):
    name, config, seed, dataset, split, schedule, weights = job
    train = dataset.subset(dataset.split("train"))
    val = dataset.subset(dataset.split("val"))
    model = BiPedModel(config, seed=seed)
    fit(model, train, val, schedule, seed=seed, weights=weights)
    return AblationResult(name, seed, model.num_parameters(), evaluate(model, dataset, split))


def run_ablation(dataset, rows, base, seeds=(0,), schedule=TrainSchedule(), split="test",
                 weights=LossWeights(), parallel=1):
    """Train and evaluate every (row, seed); results come back in row-major order."""
    configs = build_rows(base, rows)
    if split != "all" and not dataset.split(split):
        split = "val"
    jobs = [(name, cfg, s, dataset, split, schedule, weights) for name, cfg in configs for s in seeds]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(parallel) as pool:
            return list(pool.map(_run_one, jobs))
    return [_run_one(j) for j in jobs]


def summarize(results, columns=TABLE_COLUMNS):
    """One row per ablation name: parameter count and mean (std) per column."""
    names = list(dict.fromkeys(r.name for r in results))
    rows = []
    for name in names:
        rs = [r for r in results if r.name == name]
        cells = [name, str(rs[0].n_params)]
        for c in columns:
            vals = np.array([r.metrics[c] for r in rs], dtype=np.float64)
            cell = f"{vals.mean():.4f}"
            if len(vals) > 1:
                cell += f" ({vals.std():.4f})"
            cells.append(cell)
        rows.append(cells)
    return rows


def write_results(out_dir, results, columns=TABLE_COLUMNS):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("name", "seed", "params") + TABLE_COLUMNS)
        for r in results:
            w.writerow([r.name, r.seed, r.n_params] + [f"{r.metrics[c]:.6f}" for c in TABLE_COLUMNS])
    text = format_table(summarize(results, columns), header=("config", "params") + tuple(columns))
    with open(os.path.join(out_dir, "ablation.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    return text

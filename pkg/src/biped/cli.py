"""``biped`` command line: synth, train, eval, gradcheck, ablate, inspect.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Verbosity follows the BIPED_LOG environment variable (quiet, info, debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import time

from . import ablation
from .config import BiPedConfig, micro_config, parse_kv_text, build_dataclass, save_config, tiny_config
from .data.manifest import MANIFEST_NAME, Dataset
from .data.synth import WorldConfig, format_summary, parse_world_config, summarize, synthesize_dataset
from .errors import BiPedError, ConfigError, TrainingDivergedError
from .eval import evaluate, format_table, report_rows, write_errors, write_report
from .gradcheck import run_scope
from .model import BiPedModel
from .nn import load_arrays
from .objective import TrainSchedule, fit

log = logging.getLogger("biped")

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
PRESETS = {"full": BiPedConfig, "micro": micro_config, "tiny": tiny_config}
# keys a dataset fixes for any model trained on it
DATA_KEYS = ("obs_len", "pred_len", "image_width", "image_height", "map_height", "map_width")
CONFIG_NAME = "model.cfg"
PARAMS_NAME = "params.bin"
LOG_NAME = "train_log.csv"


class UsageError(ConfigError):
    pass


def _setup_logging():
    level = os.environ.get("BIPED_LOG", "info").strip().lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"BIPED_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def _read_text(path, what):
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _prepare_out(path, force, owned=()):
    """Refuse a non-empty output directory unless --force; then clear ``owned`` entries."""
    if os.path.isdir(path) and os.listdir(path):
        if not force:
            raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
        for name in owned:
            full = os.path.join(path, name)
            if os.path.isdir(full):
                shutil.rmtree(full)
            elif os.path.exists(full):
                os.remove(full)
    os.makedirs(path, exist_ok=True)


def _load_dataset(path):
    if not os.path.exists(path):
        raise UsageError(f"dataset not found: {path}")
    return Dataset.load(path)


def _dataset_fields(ds):
    h, (mh, mw) = ds.header, ds.map_shape
    return {"obs_len": h["obs_len"], "pred_len": h["pred_len"], "image_width": h["image_width"],
            "image_height": h["image_height"], "map_height": mh, "map_width": mw}


def model_config(path, preset, ds=None):
    """Preset defaults, then the config file, then the dataset's fixed shapes.

    A config file that sets a dataset-fixed key to a different value is an error.
    """
    raw = {}
    if path:
        raw = parse_kv_text(_read_text(path, "model config"), path)
    base = PRESETS[preset]().to_dict()
    explicit = build_dataclass(BiPedConfig, {**{k: str(v) for k, v in base.items()}, **raw}, path or preset)
    if ds is None:
        return explicit
    fixed = _dataset_fields(ds)
    for key, value in fixed.items():
        if key in raw and getattr(explicit, key) != value:
            raise ConfigError(f"{path}: {key} = {getattr(explicit, key)} but the dataset has {value}")
    return explicit.replace(**fixed)


def _schedule(args):
    return TrainSchedule(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                         clip_norm=args.clip_norm if args.clip_norm > 0 else None,
                         eval_every=args.eval_every)


def _eval_split(ds, requested):
    if requested:
        return requested
    return "test" if ds.split("test") else "val"


# -- commands -----------------------------------------------------------
def cmd_synth(args):
    cfg = WorldConfig()
    if args.config:
        cfg = parse_world_config(_read_text(args.config, "world config"), args.config)
    if args.workers:
        cfg = WorldConfig(**{**cfg.__dict__, "workers": args.workers})
    _prepare_out(args.out, args.force, owned=(MANIFEST_NAME, "world.cfg", "rasters"))
    t0 = time.perf_counter()
    summary = synthesize_dataset(cfg, args.seed, args.out)
    log.info("wrote %d samples to %s in %.1f s", summary["samples"], args.out, time.perf_counter() - t0)
    print(format_summary(summary))
    return 0


def cmd_train(args):
    ds = _load_dataset(args.data)
    config = model_config(args.model_config, args.preset, ds)
    train, val = ds.split("train"), ds.split("val")
    if not train or not val:
        raise UsageError(f"{args.data}: training needs non-empty train and val splits "
                         f"(found {len(train)} / {len(val)})")
    _prepare_out(args.out, args.force, owned=(CONFIG_NAME, PARAMS_NAME, LOG_NAME,
                                              "metrics.csv", "metrics.txt"))
    model = BiPedModel(config, seed=args.seed)
    log.info("model with %d parameters; %d train / %d val samples", model.num_parameters(), len(train), len(val))
    save_config(config, os.path.join(args.out, CONFIG_NAME))
    result = fit(model, ds.subset(train), ds.subset(val), _schedule(args), seed=args.seed)
    result.write_csv(os.path.join(args.out, LOG_NAME))
    model.params.save(os.path.join(args.out, PARAMS_NAME))
    split = _eval_split(ds, args.split)
    report = evaluate(model, ds, split)
    rows = write_report(args.out, [report], [f"seed{args.seed}"])
    print(f"best epoch {result.best_epoch} (val total {result.best_val:.6g}); {split} split:")
    print(format_table(rows), end="")
    return 0


def _model_from_params(params_path, config_path, preset, ds):
    if not os.path.isfile(params_path):
        raise UsageError(f"parameter file not found: {params_path}")
    config_path = config_path or os.path.join(os.path.dirname(os.path.abspath(params_path)), CONFIG_NAME)
    if not os.path.isfile(config_path):
        raise UsageError(f"model config not found: {config_path} (pass --model-config)")
    model = BiPedModel(model_config(config_path, preset, ds), seed=0)
    model.params.load(params_path)
    return model


def cmd_eval(args):
    ds = _load_dataset(args.data)
    split = _eval_split(ds, args.split)
    reports, labels = [], []
    for i, path in enumerate(args.params):
        model = _model_from_params(path, args.model_config, args.preset, ds)
        report, preds = evaluate(model, ds, split, return_predictions=True)
        reports.append(report)
        labels.append(os.path.basename(os.path.dirname(os.path.abspath(path))) or f"run{i}")
        if args.errors and args.out:
            os.makedirs(args.out, exist_ok=True)
            suffix = "" if len(args.params) == 1 else f"_{i}"
            write_errors(os.path.join(args.out, f"errors{suffix}.csv"), preds)
    rows = write_report(args.out, reports, labels) if args.out else report_rows(reports, labels)
    print(f"{split} split, {len(ds.split(split) if split != 'all' else ds.samples)} samples:")
    print(format_table(rows), end="")
    return 0


def cmd_gradcheck(args):
    scopes = ("ops", "layers", "model") if args.scope == "all" else (args.scope,)
    failed = 0
    for scope in scopes:
        t0 = time.perf_counter()
        results = run_scope(scope, seed=args.seed)
        for r in results:
            print(f"[{scope}] {r.line()}")
        bad = [r for r in results if not r.passed]
        failed += len(bad)
        worst = max(r.error for r in results)
        print(f"[{scope}] {len(results) - len(bad)}/{len(results)} passed, worst {worst:.3e}, "
              f"{time.perf_counter() - t0:.1f} s")
    return 1 if failed else 0


def cmd_ablate(args):
    ds = _load_dataset(args.data)
    base = model_config(args.model_config, args.preset, ds)
    if args.table and args.toggle:
        raise UsageError("use either --table or --toggle, not both")
    if args.table:
        rows = ablation.TABLES[args.table]
    elif args.toggle:
        rows = ablation.parse_toggles(args.toggle)
    else:
        raise UsageError("ablate needs --table or at least one --toggle")
    ablation.build_rows(base, rows)
    if args.out:
        _prepare_out(args.out, args.force, owned=("ablation.csv", "ablation.txt"))
    seeds = tuple(range(args.seeds))
    results = ablation.run_ablation(ds, rows, base, seeds, _schedule(args), split=_eval_split(ds, args.split),
                                    parallel=args.parallel)
    columns = ablation.TRAJECTORY_ONLY if args.table == "3" else ablation.TABLE_COLUMNS
    if args.out:
        text = ablation.write_results(args.out, results, columns)
    else:
        text = format_table(ablation.summarize(results, columns), header=("config", "params") + tuple(columns))
    print(text, end="")
    return 0


def cmd_inspect(args):
    if not (args.data or args.params or args.model_config):
        raise UsageError("inspect needs --data, --params or --model-config")
    if args.data:
        ds = _load_dataset(args.data)
        info = summarize(ds.samples)
        info["map_shape"] = list(ds.map_shape)
        info["obs_len"], info["pred_len"] = ds.header["obs_len"], ds.header["pred_len"]
        info["grid"] = [ds.grid.rows, ds.grid.cols, ds.grid.cell]
        print(format_summary(info))
    if args.model_config:
        config = model_config(args.model_config, args.preset)
        print(config.to_text(), end="")
        print(f"parameters = {BiPedModel(config).num_parameters()}")
    if args.params:
        if not os.path.isfile(args.params):
            raise UsageError(f"parameter file not found: {args.params}")
        arrays = load_arrays(args.params)
        for name, arr in arrays.items():
            print(f"{name:<32} {'x'.join(map(str, arr.shape)) or 'scalar'}")
        print(f"total {sum(a.size for a in arrays.values())} values in {len(arrays)} arrays")
    return 0


# -- parser -------------------------------------------------------------
def _add_training_flags(p, epochs=300):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--clip-norm", type=float, default=5.0, help="global gradient norm clip; 0 disables")
    p.add_argument("--eval-every", type=int, default=1, help="validate every N epochs")


def _add_model_flags(p):
    p.add_argument("--model-config", help="key = value model config file")
    p.add_argument("--preset", choices=sorted(PRESETS), default="full",
                   help="defaults the config file is applied on top of")


def build_parser():
    parser = argparse.ArgumentParser(prog="biped", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="world config file (key = value)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=0, help="parallel scenario workers")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and evaluate it")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", help="split for the final report (default test, else val)")
    p.add_argument("--force", action="store_true")
    _add_model_flags(p)
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate trained parameters")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True, nargs="+", help="one file per seed for mean/std reports")
    p.add_argument("--split", help="train, val, test or all (default test, else val)")
    p.add_argument("--out", help="directory for metrics.csv / metrics.txt")
    p.add_argument("--errors", action="store_true", help="also write per-sample errors.csv")
    _add_model_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", choices=("ops", "layers", "model", "all"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="ablation sweeps")
    p.add_argument("--data", required=True)
    p.add_argument("--table", choices=sorted(ablation.TABLES))
    p.add_argument("--toggle", "--grid", action="append", metavar="KEY=V1,V2",
                   help=f"toggle axis; keys: {', '.join(ablation.TOGGLE_KEYS)}")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds (0..N-1)")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--split")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    _add_model_flags(p)
    _add_training_flags(p, epochs=20)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="summarize a dataset, config or parameter file")
    p.add_argument("--data")
    p.add_argument("--params")
    _add_model_flags(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"biped {args.command}: training aborted: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"biped {args.command}: {exc}", file=sys.stderr)
        return 2
    except (BiPedError, ValueError, OSError) as exc:
        print(f"biped {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

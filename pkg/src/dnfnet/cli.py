"""Command-line entry point.

Every subcommand writes its records as JSON lines to ``<output-dir>/results.jsonl``
together with ``manifest.txt``, a key-value copy of the effective settings.
Feeding that copy back through ``--manifest`` reproduces the run.  Without
``--output-dir`` the directory comes from ``$DNFNET_OUTPUT_DIR`` or defaults to
``./dnfnet-out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from functools import partial
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .data import SYNTH_DIMS, SYNTH_TASKS, Dataset, SynthSpec, gen_synth, load_csv, synth_manifest, write_csv
from .experiments import FS_BETAS, FS_TRAIN, fs_compare
from .metrics import metrics
from .model import ABLATIONS, DataError, DnfNet, DnfNetSpec, Fcn, FcnSpec, load_checkpoint, save_checkpoint
from .protocol import GRID_SEEDS, N_FOLDS, grid_search, make_partitions, partition_splits
from .selection import BETA_GRID
from .training import TrainConfig, TrainingError, evaluate, train_model
from .vc import emit_vc_curves

SCHEMA = "dnfnet-results"
SCHEMA_VERSION = 1
OUTPUT_ENV = "DNFNET_OUTPUT_DIR"
DEFAULT_OUTPUT = "dnfnet-out"
# settings that never change results and are left out of the manifest copy
_RUNTIME_KEYS = {"command", "manifest", "output_dir", "format", "jobs", "verbose", "func"}

logger = logging.getLogger("dnfnet")


class UsageError(Exception):
    """Bad command-line or manifest input; exits with status 2."""


# ---------------------------------------------------------------------------
# manifest files
# ---------------------------------------------------------------------------
def read_manifest(path) -> dict:
    """Parse ``key = value`` lines; values are JSON where possible, else raw text."""
    out = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out[key.replace("-", "_")] = value
    return out


def format_manifest(settings: dict) -> str:
    lines = [f"{k.replace('_', '-')} = {json.dumps(v, sort_keys=True)}"
             for k, v in sorted(settings.items()) if k not in _RUNTIME_KEYS]
    return "\n".join(lines) + "\n"


def _apply_manifest(parser: argparse.ArgumentParser, values: dict) -> None:
    """Install manifest values as defaults, validating each against its option."""
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key in _RUNTIME_KEYS:
            raise UsageError(f"manifest field {key!r} is not an option of this command")
        try:
            defaults[key] = _coerce(action, value)
        except (TypeError, ValueError):
            raise UsageError(f"manifest field {key!r}: invalid value {value!r}") from None
    parser.set_defaults(**defaults)


def _coerce(action: argparse.Action, value):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        if not isinstance(value, bool):
            raise ValueError(value)
        return value
    if action.nargs in ("+", "*"):
        items = value if isinstance(value, list) else [value]
        out = [action.type(v) if action.type else v for v in items]
    elif value is None:
        return None
    else:
        out = action.type(value) if action.type else value
    for v in out if isinstance(out, list) else [out]:
        if action.choices is not None and v not in action.choices:
            raise ValueError(v)
    return out


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------
def _output_dir(args) -> Path:
    out = Path(args.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _clean(value):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to strings."""
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    return value


def write_results(args, records: list[dict]) -> Path:
    out = _output_dir(args)
    settings = {k: v for k, v in vars(args).items() if k not in _RUNTIME_KEYS}
    (out / "manifest.txt").write_text(
        f"command = {json.dumps(args.command)}\n" + format_manifest(settings), encoding="utf-8")
    path = out / "results.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            rec = {"schema": SCHEMA, "schema_version": SCHEMA_VERSION, **_clean(rec)}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def print_records(args, records: list[dict], columns: list[str]) -> None:
    if args.format == "records":
        for rec in records:
            print(json.dumps(_clean(rec), sort_keys=True))
        return
    rows = [[_cell(rec.get(c)) for c in columns] for rec in records]
    widths = [max([len(c)] + [len(r[i]) for r in rows]) for i, c in enumerate(columns)]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    for row in rows:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)))


def _cell(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


# ---------------------------------------------------------------------------
# shared option groups
# ---------------------------------------------------------------------------
def _add_data_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data (a CSV file or a synthetic task)")
    g.add_argument("--data", help="CSV file with a header row")
    g.add_argument("--label-column", default="label")
    g.add_argument("--task", choices=SYNTH_TASKS, help="generate a synthetic task instead of --data")
    g.add_argument("--d", type=int, default=11, help="synthetic feature count")
    g.add_argument("--n-samples", type=int, default=10_000)
    g.add_argument("--data-seed", type=int, default=1)


def _add_training_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=None, help="defaults: 0.05 for dnfnet, 0.005 for fcn")
    g.add_argument("--batch-size", type=int, default=256)
    g.add_argument("--max-epochs", type=int, default=1000)
    g.add_argument("--patience", type=int, default=30)
    g.add_argument("--metric", choices=("log_loss", "roc_auc", "accuracy"), default=None)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", help="key-value file supplying option defaults")
    p.add_argument("--output-dir", help=f"results directory (default: ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    p.add_argument("--format", choices=("table", "records"), default="table")
    p.add_argument("--verbose", action="store_true")


def _load_dataset(args) -> Dataset:
    if args.data and args.task:
        raise UsageError("give either --data or --task, not both")
    if args.data:
        return load_csv(args.data, args.label_column)
    if args.task:
        try:
            return gen_synth(SynthSpec(args.task, args.d, args.n_samples, args.data_seed))
        except ContractError as exc:
            raise UsageError(f"--d/--n-samples: {exc}") from None
    raise UsageError("missing --data (or --task for a synthetic dataset)")


def _train_config(args, seed: int, lr: float | None = None) -> TrainConfig:
    default_lr = 0.05 if args.model == "dnfnet" else 0.005
    lr = lr if lr is not None else (args.lr if args.lr is not None else default_lr)
    try:
        return TrainConfig(batch_size=args.batch_size, max_epochs=args.max_epochs, patience=args.patience,
                           lr=lr, seed=seed, metric=args.metric)
    except ContractError as exc:
        raise UsageError(f"training options: {exc}") from None


def _build(args, config: dict, d: int, n_classes: int, seed: int):
    if args.model == "dnfnet":
        spec = DnfNetSpec(config["n_formulas"], d, n_classes, beta=config["beta"]).with_ablation(config["ablation"])
        return DnfNet(spec, seed=seed)
    spec = FcnSpec(config["depth"], config["width"], config["width_scheme"], config["dropout"], config["l2"],
                   config["lr"])
    return Fcn(spec, d, n_classes, seed=seed)


# ---------------------------------------------------------------------------
# train / evaluate
# ---------------------------------------------------------------------------
def cmd_train(args) -> int:
    dataset = _load_dataset(args)
    if not 0 <= args.partition < N_FOLDS:
        raise UsageError(f"--partition must be in [0, {N_FOLDS})")
    ablation = _ablation_preset(args)
    config = {"n_formulas": args.n_formulas, "beta": args.beta, "ablation": ablation, "depth": args.depth,
              "width": args.width, "width_scheme": args.width_scheme, "dropout": args.dropout, "l2": args.l2,
              "lr": args.lr if args.lr is not None else 0.005}
    train, val, test = partition_splits(dataset, make_partitions(dataset)[args.partition])
    model = _build(args, config, dataset.features.shape[1], train.class_count, args.seed)
    cfg = _train_config(args, args.seed, config["lr"] if args.model == "fcn" else None)
    hist = train_model(model, train, val, cfg)
    out = _output_dir(args)
    save_checkpoint(model, out / "checkpoint.npz")
    final = {
        "record": "run",
        "model": args.model,
        "config": config if args.model == "fcn" else {k: config[k] for k in ("n_formulas", "beta", "ablation")},
        "seed": args.seed,
        "partition": args.partition,
        "best_epoch": hist.best_epoch,
        "epochs": hist.epochs,
        "val": metrics(model.predict_proba(val.features), val.labels, model.task),
        "test": metrics(model.predict_proba(test.features), test.labels, model.task),
    }
    records = [final, {"record": "history", **hist.as_dict()}]
    write_results(args, records)
    print_records(args, [_flat_run(final)], ["model", "seed", "partition", "best_epoch", "val_" + hist.metric,
                                             "test_" + hist.metric])
    return 0


def _flat_run(rec: dict) -> dict:
    flat = {k: v for k, v in rec.items() if not isinstance(v, dict)}
    for split in ("val", "test"):
        flat.update({f"{split}_{k}": v for k, v in rec[split].items()})
    return flat


def _ablation_preset(args) -> str:
    if args.ablation:
        return args.ablation
    dnf, fs, loc = not args.no_dnf_structure, not args.no_feature_selection, not args.no_localization
    for name, flags in ABLATIONS.items():
        if flags == (dnf, fs, loc):
            return name
    raise UsageError("this combination of --no-* flags matches no ablation preset")


def cmd_evaluate(args) -> int:
    if not args.checkpoint:
        raise UsageError("missing --checkpoint")
    dataset = _load_dataset(args)
    try:
        model = load_checkpoint(args.checkpoint)
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"--checkpoint: cannot load {args.checkpoint}: {exc}") from None
    train, val, test = partition_splits(dataset, make_partitions(dataset)[args.partition])
    record = {"record": "evaluation", "checkpoint": Path(args.checkpoint).name, "partition": args.partition}
    for name, split in (("val", val), ("test", test)):
        record[name] = metrics(model.predict_proba(split.features), split.labels, model.task)
    write_results(args, [record])
    print_records(args, [_flat_run(record)], ["checkpoint", "partition", *[
        f"{s}_{k}" for s in ("val", "test") for k in record[s]]])
    return 0


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------
def _grid_configs(args) -> list[dict]:
    if args.model == "dnfnet":
        preset = _ablation_preset(args)
        return [{"n_formulas": n, "beta": b, "ablation": preset} for n in args.n_formulas for b in args.beta]
    lrs = args.lr_grid
    return [{"depth": dp, "width": w, "width_scheme": args.width_scheme, "l2": l2, "dropout": dr, "lr": lr}
            for dp in args.depth for w in args.width for l2 in args.l2 for dr in args.dropout for lr in lrs]


def _grid_cell(config: dict, partition: int, seed: int, *, args, dataset: Dataset, metric: str):
    """One grid cell: train on ``partition`` and return (val, test, extras)."""
    train, val, test = partition_splits(dataset, make_partitions(dataset)[partition])
    model = _build(args, config, dataset.features.shape[1], train.class_count, seed)
    cfg = replace(_train_config(args, seed, config.get("lr")), metric=metric)
    hist = train_model(model, train, val, cfg)
    return hist.best_score, evaluate(model, test, metric), {"best_epoch": hist.best_epoch, "epochs": hist.epochs}


def cmd_gridsearch(args) -> int:
    dataset = _load_dataset(args)
    configs = _grid_configs(args)
    if not configs:
        raise UsageError("the grid is empty")
    bad = [p for p in args.partitions if not 0 <= p < N_FOLDS]
    if bad:
        raise UsageError(f"--partitions: {bad} outside [0, {N_FOLDS})")
    task = "binary" if dataset.class_count == 2 else "multiclass"
    metric = args.metric or ("roc_auc" if task == "binary" else "log_loss")
    fn = partial(_grid_cell, args=args, dataset=dataset, metric=metric)
    result = grid_search(fn, configs, args.partitions, metric, seeds=args.seeds, jobs=args.jobs)
    records = []
    for cell in result.cells:
        rec = {"record": "cell", "seed": cell.seed, "partition": cell.partition, "config_id": cell.config_id,
               "config": configs[cell.config_id], "val": cell.val_score,
               "test": None if cell.failed else cell.test.value, **cell.extra}
        if cell.failed:
            rec["error"] = cell.error
        records.append(rec)
    for s in result.seeds:
        records.append({"record": "seed", "seed": s.seed, "chosen": s.chosen, "val": s.val_scores,
                        "test": s.test_scores, "mean": s.mean, "sem": s.sem})
    aggregate = {"record": "aggregate", "metric": metric, "mean": result.mean, "sem": result.sem,
                 "failed_cells": len(result.failures)}
    records.append(aggregate)
    write_results(args, records)
    print_records(args, [r for r in records if r["record"] in ("seed", "aggregate")],
                  ["record", "seed", "chosen", "mean", "sem"])
    return 0 if not result.failures else 1


# ---------------------------------------------------------------------------
# synthetic data, feature-selection comparison, VC curves
# ---------------------------------------------------------------------------
def cmd_synth(args) -> int:
    dims = SYNTH_DIMS if args.sweep_d else (args.d,)
    if min(dims) < 11:
        raise UsageError(f"--d must be >= 11, got {min(dims)}")
    out = _output_dir(args)
    records = []
    for d in dims:
        spec = SynthSpec(args.task, d, args.n_samples, args.seed)
        ds = gen_synth(spec)
        stem = f"{args.task}_d{d}_n{args.n_samples}_s{args.seed}"
        write_csv(out / f"{stem}.csv", ds.features, ds.labels, ds.feature_names)
        text = synth_manifest(spec, ds)
        (out / f"{stem}.manifest").write_text(text, encoding="utf-8")
        records.append({"record": "synth", "file": f"{stem}.csv", "task": args.task, "d": d,
                        "n_samples": args.n_samples, "seed": args.seed,
                        "positive_rate": float(ds.labels.mean()), "sha256": text.split('sha256 = ')[1].strip('"\n')})
    write_results(args, records)
    print_records(args, records, ["file", "d", "n_samples", "positive_rate"])
    return 0


def cmd_fs_compare(args) -> int:
    if min(args.d) < 11:
        raise UsageError(f"--d must be >= 11, got {min(args.d)}")
    cfg = replace(FS_TRAIN, batch_size=args.batch_size, lr=args.lr, max_epochs=args.max_epochs,
                  patience=args.patience)
    rows = []
    for task in args.tasks:
        for d in args.d:
            rows += fs_compare(task, d, tuple(args.seeds), n_samples=args.n_samples, betas=tuple(args.beta),
                               partition=args.partition, train_cfg=cfg)
    records = [{"record": "fs_compare", **r} for r in rows]
    write_results(args, records)
    print_records(args, records, ["task", "d", "regime", "accuracy_mean", "accuracy_sem", "beta"])
    return 0


def cmd_vc_curves(args) -> int:
    if args.n_min < 1 or args.n_max < args.n_min or args.n_step < 1:
        raise UsageError("need 1 <= --n-min <= --n-max and --n-step >= 1")
    base = math.e if args.base == "e" else float(args.base)
    rows = emit_vc_curves(range(args.n_min, args.n_max + 1, args.n_step), args.ranks, args.ks, base)
    out = _output_dir(args)
    with open(out / "vc_curves.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("n,series,value\n")
        for n, series, value in rows:
            fh.write(f"{n},{series},{value!r}\n")
    records = [{"record": "vc", "n": n, "series": s, "value": v} for n, s, v in rows]
    write_results(args, records)
    print_records(args, records, ["n", "series", "value"])
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dnfnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration on one partition")
    _add_common(p)
    _add_data_options(p)
    _add_training_options(p)
    p.add_argument("--model", choices=("dnfnet", "fcn"), default="dnfnet")
    p.add_argument("--n-formulas", type=int, default=16)
    p.add_argument("--beta", type=float, default=1.0, help="feature-selection beta")
    p.add_argument("--ablation", choices=sorted(ABLATIONS), default=None)
    p.add_argument("--no-dnf-structure", action="store_true")
    p.add_argument("--no-feature-selection", action="store_true")
    p.add_argument("--no-localization", action="store_true")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--width-scheme", choices=("constant", "halving"), default="constant")
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--partition", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a partition's validation and test splits")
    _add_common(p)
    _add_data_options(p)
    p.add_argument("--checkpoint")
    p.add_argument("--partition", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gridsearch", help="validation-selected grid search over partitions and seeds")
    _add_common(p)
    _add_data_options(p)
    _add_training_options(p)
    p.add_argument("--model", choices=("dnfnet", "fcn"), default="dnfnet")
    p.add_argument("--n-formulas", type=int, nargs="+", default=[64])
    p.add_argument("--beta", type=float, nargs="+", default=list(BETA_GRID))
    p.add_argument("--ablation", choices=sorted(ABLATIONS), default=None)
    p.add_argument("--no-dnf-structure", action="store_true")
    p.add_argument("--no-feature-selection", action="store_true")
    p.add_argument("--no-localization", action="store_true")
    p.add_argument("--depth", type=int, nargs="+", default=[2])
    p.add_argument("--width", type=int, nargs="+", default=[128])
    p.add_argument("--width-scheme", choices=("constant", "halving"), default="constant")
    p.add_argument("--l2", type=float, nargs="+", default=[0.0])
    p.add_argument("--dropout", type=float, nargs="+", default=[0.0])
    p.add_argument("--lr-grid", type=float, nargs="+", default=[0.005], help="FCN learning rates")
    p.add_argument("--seeds", type=int, nargs="+", default=list(GRID_SEEDS))
    p.add_argument("--partitions", type=int, nargs="+", default=list(range(N_FOLDS)))
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("synth", help="generate synthetic feature-selection datasets")
    _add_common(p)
    p.add_argument("--task", choices=SYNTH_TASKS, default="syn1")
    p.add_argument("--d", type=int, default=11)
    p.add_argument("--n-samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--sweep-d", action="store_true", help=f"emit every d in {SYNTH_DIMS}")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fs-compare", help="FCN accuracy under no, learned and oracle feature selection")
    _add_common(p)
    p.add_argument("--tasks", choices=SYNTH_TASKS, nargs="+", default=["syn1"])
    p.add_argument("--d", type=int, nargs="+", default=[11])
    p.add_argument("--seeds", type=int, nargs="+", default=list(GRID_SEEDS))
    p.add_argument("--n-samples", type=int, default=10_000)
    p.add_argument("--beta", type=float, nargs="+", default=list(FS_BETAS))
    p.add_argument("--partition", type=int, default=0)
    p.add_argument("--lr", type=float, default=FS_TRAIN.lr)
    p.add_argument("--batch-size", type=int, default=FS_TRAIN.batch_size)
    p.add_argument("--max-epochs", type=int, default=FS_TRAIN.max_epochs)
    p.add_argument("--patience", type=int, default=FS_TRAIN.patience)
    p.set_defaults(func=cmd_fs_compare)

    p = sub.add_parser("vc-curves", help="tree VC-dimensions and DNF bounds as a CSV table")
    _add_common(p)
    p.add_argument("--n-min", type=int, default=1)
    p.add_argument("--n-max", type=int, default=100)
    p.add_argument("--n-step", type=int, default=1)
    p.add_argument("--ranks", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--ks", type=int, nargs="+", default=[64, 512, 2048])
    p.add_argument("--base", choices=("2", "e"), default="2")
    p.set_defaults(func=cmd_vc_curves)
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.manifest:
            values = read_manifest(args.manifest)
            command = values.pop("command", args.command)
            if command != args.command:
                raise UsageError(f"manifest is for {command!r}, not {args.command!r}")
            _apply_manifest(_subparser(parser, args.command), values)
            args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dnfnet: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ContractError, TrainingError, OSError) as exc:
        print(f"dnfnet: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

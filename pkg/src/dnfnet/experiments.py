"""Experiment drivers shared by the CLI and the acceptance suite.

``fs_compare`` trains the small FCN under no, oracle and learned feature
selection on a synthetic task.  ``ablation`` trains DNF-Net presets on one
dataset partition.  Both are deterministic for fixed arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, DatasetSplit, SynthSpec, gen_synth, oracle_mask
from .metrics import HIGHER_IS_BETTER, score
from .model import DnfNet, DnfNetSpec, Fcn, FcnSpec
from .protocol import make_partitions, partition_splits, sem
from .training import TrainConfig, evaluate, train_model

FS_BETAS = (1.3, 1.0, 0.7, 0.4)
FS_FCN = FcnSpec(depth=2, width=64, width_scheme="halving")
FS_TRAIN = TrainConfig(batch_size=256, lr=0.001, metric="log_loss")
REGIMES = ("none", "learned", "oracle")


@dataclass
class RegimeRun:
    """One trained FCN under a feature-selection regime."""

    regime: str
    seed: int
    beta: float | None
    val_score: float
    accuracy: float
    mask: np.ndarray


def _splits(dataset: Dataset, partition: int) -> tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    return partition_splits(dataset, make_partitions(dataset)[partition])


def _fit_fcn(splits, d, seed, input_mask, beta, train_cfg):
    train, val, test = splits
    model = Fcn(FS_FCN, d, train.class_count, seed=seed, input_mask=input_mask, beta=beta)
    hist = train_model(model, train, val, replace(train_cfg, seed=seed))
    return model, hist.best_score, evaluate(model, test, "accuracy")


def fs_regime_runs(
    task: str,
    d: int,
    seeds=(1, 2, 3),
    n_samples: int = 10_000,
    betas=FS_BETAS,
    partition: int = 0,
    train_cfg: TrainConfig = FS_TRAIN,
    regimes=REGIMES,
) -> list[RegimeRun]:
    """Train the three regimes for every seed on one partition of a synthetic task.

    The learned regime trains one model per β and keeps the one with the best
    validation score; test accuracy is read only after that choice.
    """
    dataset = gen_synth(SynthSpec(task, d, n_samples, seed=1))
    splits = _splits(dataset, partition)
    higher = HIGHER_IS_BETTER[train_cfg.metric_for("binary")]
    runs = []
    for seed in seeds:
        for regime in regimes:
            if regime == "learned":
                best = None
                for beta in betas:
                    model, val, acc = _fit_fcn(splits, d, seed, "learned", beta, train_cfg)
                    if best is None or (val > best[1] if higher else val < best[1]):
                        best = (beta, val, acc, model.effective_mask())
                beta, val, acc, mask = best
                runs.append(RegimeRun(regime, seed, beta, val, acc, mask))
                continue
            input_mask = oracle_mask(task, d) if regime == "oracle" else None
            model, val, acc = _fit_fcn(splits, d, seed, input_mask, 1.0, train_cfg)
            runs.append(RegimeRun(regime, seed, None, val, acc, model.effective_mask()))
    return runs


def summarize_regimes(task: str, d: int, runs: list[RegimeRun]) -> list[dict]:
    """Exactly one row per regime: accuracy mean and SEM over seeds."""
    rows = []
    for regime in REGIMES:
        group = [r for r in runs if r.regime == regime]
        if not group:
            continue
        accs = [r.accuracy for r in group]
        row = {"task": task, "d": d, "regime": regime, "accuracy_mean": float(np.mean(accs)),
               "accuracy_sem": sem(accs), "seeds": [r.seed for r in group]}
        if regime == "learned":
            row["beta"] = [r.beta for r in group]
            row["kept_features"] = [[int(i) + 1 for i in np.flatnonzero(r.mask)] for r in group]
        rows.append(row)
    return rows


def fs_compare(task: str, d: int, seeds=(1, 2, 3), **kwargs) -> list[dict]:
    return summarize_regimes(task, d, fs_regime_runs(task, d, seeds, **kwargs))


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------
ABLATION_TRAIN = TrainConfig(batch_size=256, lr=0.05, max_epochs=60, patience=10, metric="log_loss")


def ablation_run(
    dataset: Dataset,
    preset: str,
    n_formulas: int,
    seed: int,
    beta: float = 1.0,
    partition: int = 0,
    train_cfg: TrainConfig = ABLATION_TRAIN,
) -> dict:
    """Train one ablation preset and report validation and test log-loss."""
    train, val, test = _splits(dataset, partition)
    spec = DnfNetSpec(n_formulas, dataset.features.shape[1], train.class_count, beta=beta).with_ablation(preset)
    model = DnfNet(spec, seed=seed)
    hist = train_model(model, train, val, replace(train_cfg, seed=seed))
    probs = model.predict_proba(test.features)
    return {
        "preset": preset,
        "seed": seed,
        "epochs": hist.epochs,
        "best_epoch": hist.best_epoch,
        "val_log_loss": hist.best_score if hist.metric == "log_loss" else evaluate(model, val, "log_loss"),
        "test_log_loss": score("log_loss", probs, test.labels),
    }

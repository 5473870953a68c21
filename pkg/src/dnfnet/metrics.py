"""Evaluation scores on predicted probabilities."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .autodiff import ContractError

PROB_CLIP = 1e-15

# metric name -> True if larger is better
HIGHER_IS_BETTER = {"log_loss": False, "roc_auc": True, "accuracy": True}


def _as_class_probs(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = np.stack([1.0 - probs, probs], axis=1)
    return probs


def log_loss(probs, labels) -> float:
    """Mean negative natural-log likelihood; ``probs`` is P(y=1) for binary
    tasks or a (samples, classes) matrix."""
    probs = _as_class_probs(probs)
    labels = np.asarray(labels, dtype=np.intp)
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ContractError("label out of range for the probability matrix")
    picked = np.clip(probs[np.arange(len(labels)), labels], PROB_CLIP, 1.0)
    return float(-np.mean(np.log(picked)))


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve as a percentage (Mann-Whitney rank statistic,
    ties get half credit)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("ROC AUC is undefined with a single class")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(100.0 * u / (n_pos * n_neg))


def accuracy(probs, labels) -> float:
    probs = _as_class_probs(probs)
    return float(100.0 * np.mean(probs.argmax(axis=1) == np.asarray(labels)))


def score(metric: str, probs, labels) -> float:
    if metric == "log_loss":
        return log_loss(probs, labels)
    if metric == "roc_auc":
        probs = np.asarray(probs)
        return roc_auc(probs if probs.ndim == 1 else probs[:, 1], labels)
    if metric == "accuracy":
        return accuracy(probs, labels)
    raise ContractError(f"unknown metric {metric!r}")


def metrics(probs, labels, task: str) -> dict[str, float]:
    """log-loss for every task, plus ROC AUC (percent) for binary tasks."""
    out = {"log_loss": log_loss(probs, labels)}
    if task == "binary":
        probs = np.asarray(probs)
        out["roc_auc"] = roc_auc(probs if probs.ndim == 1 else probs[:, 1], labels)
    return out


def is_better(metric: str, candidate: float, incumbent: float) -> bool:
    return candidate > incumbent if HIGHER_IS_BETTER[metric] else candidate < incumbent

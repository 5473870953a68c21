"""Adam, reduce-on-plateau, early stopping and the epoch loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError
from .data import DatasetSplit
from .metrics import HIGHER_IS_BETTER, score
from .model import DataError, Model

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    """Raised when optimization diverges (e.g. a NaN gradient)."""


@dataclass
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 1000
    patience: int = 30
    lr: float = 0.05
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    min_delta: float = 1e-4
    min_lr: float = 1e-6
    seed: int = 1
    metric: str | None = None  # None: log_loss for multiclass, roc_auc for binary

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ContractError("learning rate must be positive")
        if not 0 <= self.patience < self.max_epochs:
            raise ContractError("patience must be in [0, max_epochs)")
        if not 0 < self.plateau_factor < 1:
            raise ContractError("plateau factor must lie in (0, 1)")

    def metric_for(self, task: str) -> str:
        if self.metric:
            return self.metric
        return "roc_auc" if task == "binary" else "log_loss"


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------
@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), 0)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              name: str = "parameter") -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state`` and returns the new value."""
    if param.shape != grad.shape:
        raise ContractError(f"{name}: grad shape {grad.shape} != param shape {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise TrainingError(f"non-finite gradient in {name} at step {state.t + 1}")
    state.t += 1
    state.m = ADAM_BETA1 * state.m + (1 - ADAM_BETA1) * grad
    state.v = ADAM_BETA2 * state.v + (1 - ADAM_BETA2) * grad * grad
    m_hat = state.m / (1 - ADAM_BETA1**state.t)
    v_hat = state.v / (1 - ADAM_BETA2**state.t)
    return param - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], lr: float):
        self.params = params
        self.lr = lr
        self.state = {k: AdamState.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data = adam_step(p.data, grad.reshape(p.data.shape), self.state[name], self.lr, name)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------
class ReduceLROnPlateau:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without a
    ``min_delta`` improvement of the monitored (training) loss, then wait a
    cooldown of ``patience`` epochs."""

    def __init__(self, factor: float = 0.5, patience: int = 10, min_delta: float = 1e-4,
                 min_lr: float = 1e-6):
        if not 0 < factor < 1:
            raise ContractError("factor must lie in (0, 1)")
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.min_lr = min_lr
        self.best = np.inf
        self.wait = 0
        self.cooldown = 0

    def step(self, loss: float, lr: float) -> float:
        if self.cooldown > 0:
            self.cooldown -= 1
            self.wait = 0
        if loss < self.best - self.min_delta:
            self.best = loss
            self.wait = 0
        elif self.cooldown == 0:
            self.wait += 1
            if self.wait >= self.patience:
                self.wait = 0
                self.cooldown = self.patience
                return max(lr * self.factor, self.min_lr)
        return lr


def reduce_on_plateau(losses, factor: float = 0.5, patience: int = 10,
                      min_delta: float = 1e-4) -> list[int]:
    """1-based epochs at which the scheduler would cut the learning rate."""
    sched = ReduceLROnPlateau(factor, patience, min_delta, min_lr=0.0)
    events = []
    lr = 1.0
    for epoch, loss in enumerate(losses, start=1):
        new_lr = sched.step(float(loss), lr)
        if new_lr != lr:
            events.append(epoch)
        lr = new_lr
    return events


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------
@dataclass
class History:
    metric: str
    train_loss: list[float] = field(default_factory=list)
    val_score: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = float("nan")

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def as_dict(self) -> dict:
        return {
            "metric": self.metric,
            "train_loss": self.train_loss,
            "val_score": self.val_score,
            "lr": self.lr,
            "best_epoch": self.best_epoch,
            "best_score": self.best_score,
        }


def evaluate(model: Model, split: DatasetSplit, metric: str) -> float:
    return score(metric, model.predict_proba(split.features), split.labels)


def train_model(model: Model, train: DatasetSplit, val: DatasetSplit,
                config: TrainConfig, on_epoch_end=None) -> History:
    """Mini-batch Adam with plateau scheduling on the training loss and early
    stopping on the validation score; the best-epoch weights are restored.

    ``on_epoch_end(epoch, model, history)`` is called after each epoch's
    validation pass, before any early-stopping decision.
    """
    if len(train) == 0 or len(val) == 0:
        raise DataError("train and validation splits must be nonempty")
    metric = config.metric_for(model.task)
    higher = HIGHER_IS_BETTER[metric]
    rng = np.random.default_rng([config.seed, 7919])
    params = model.parameters()
    opt = Adam(params, config.lr)
    sched = ReduceLROnPlateau(config.plateau_factor, config.plateau_patience,
                              config.min_delta, config.min_lr)
    hist = History(metric)
    best_weights = model.get_weights()
    best = -np.inf if higher else np.inf
    wait = 0
    n = len(train)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            model.zero_grad()
            loss = model.loss(train.features[idx], train.labels[idx], training=True)
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        train_loss = total / n
        current = evaluate(model, val, metric)
        hist.train_loss.append(train_loss)
        hist.val_score.append(current)
        hist.lr.append(opt.lr)
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, hist)
        if not np.isfinite(train_loss):
            raise TrainingError(f"training loss became {train_loss} at epoch {epoch}")
        if current > best if higher else current < best:
            best, wait = current, 0
            hist.best_epoch, hist.best_score = epoch, current
            best_weights = model.get_weights()
        else:
            wait += 1
            if wait >= max(config.patience, 1):
                logger.debug("early stop at epoch %d (best %d)", epoch, hist.best_epoch)
                break
        opt.lr = sched.step(train_loss, opt.lr)
    model.set_weights(best_weights)
    return hist

"""CSV ingestion, train-fitted standardization and the synthetic feature-selection tasks."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .model import DataError

SYNTH_TASKS = ("syn1", "syn2", "syn3", "syn4", "syn5", "syn6")
SYNTH_DIMS = (11, 50, 100, 150, 200, 250, 300)
GENERATOR = "numpy.random.PCG64/standard_normal+random"
GENERATOR_VERSION = 1


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: list[str] | None = None

    @property
    def class_count(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class DatasetSplit:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    feature_means: np.ndarray
    feature_stds: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------
def load_csv(path, label_column: str = "label") -> Dataset:
    """Read a comma-delimited UTF-8 table with a header row.

    Labels are mapped to contiguous integer ids (sorted order of the distinct
    values).  Missing or non-numeric feature cells raise :class:`DataError`
    naming the 1-based data row and the column.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not in header")
        label_idx = header.index(label_column)
        feature_names = [h for i, h in enumerate(header) if i != label_idx]
        rows, raw_labels = [], []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}")
            values = []
            for col, cell in enumerate(row):
                cell = cell.strip()
                if cell == "":
                    raise DataError(f"{path}: missing value at row {row_no}, column {header[col]!r}")
                if col == label_idx:
                    raw_labels.append(cell)
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: non-numeric value {cell!r} at row {row_no}, column {header[col]!r}"
                    ) from None
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    features = np.array(rows, dtype=np.float64)
    return Dataset(features, _encode_labels(raw_labels), feature_names)


def _encode_labels(raw: list[str]) -> np.ndarray:
    try:
        numeric = [float(v) for v in raw]
    except ValueError:
        numeric = None
    if numeric is not None and all(v.is_integer() for v in numeric):
        keys = sorted(set(numeric))
        lookup = {k: i for i, k in enumerate(keys)}
        return np.array([lookup[v] for v in numeric], dtype=np.int64)
    keys = sorted(set(raw))
    lookup = {k: i for i, k in enumerate(keys)}
    return np.array([lookup[v] for v in raw], dtype=np.int64)


def write_csv(path, features: np.ndarray, labels: np.ndarray, feature_names=None,
              label_column: str = "label") -> Path:
    """Write features with ``repr`` floats so a reload is bit-identical."""
    path = Path(path)
    d = features.shape[1]
    names = feature_names or [f"x{i + 1}" for i in range(d)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*names, label_column])
        for row, label in zip(features, labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
    return path


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------
def standardize(train: Dataset, *others: Dataset) -> list[DatasetSplit]:
    """Scale every split with the per-feature mean/std (ddof=0) of ``train``.

    Zero-variance features keep std 1, i.e. they are only centered.
    """
    if len(train) == 0:
        raise DataError("cannot standardize an empty training split")
    means = train.features.mean(axis=0)
    stds = train.features.std(axis=0)
    stds = np.where(stds > 0, stds, 1.0)
    classes = max(ds.class_count for ds in (train, *others))
    return [
        DatasetSplit((ds.features - means) / stds, ds.labels, classes, means, stds)
        for ds in (train, *others)
    ]


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SynthSpec:
    task: str
    d: int = 11
    n_samples: int = 10_000
    seed: int = 1

    def __post_init__(self):
        if self.task not in SYNTH_TASKS:
            raise ContractError(f"unknown synthetic task {self.task!r}")
        if self.d < 11:
            raise ContractError(f"synthetic tasks need d >= 11, got {self.d}")
        if self.n_samples < 1:
            raise ContractError("n_samples must be positive")


def _col(x: np.ndarray, i: int) -> np.ndarray:
    return x[:, i - 1]  # 1-based feature index


def _logit1(x):
    return np.exp(_col(x, 1) * _col(x, 2))


def _logit2(x):
    return np.exp(sum(_col(x, i) ** 2 for i in range(3, 7)) - 4.0)


def _logit3(x):
    return (-10.0 * np.sin(2.0 * _col(x, 7)) + 2.0 * np.abs(_col(x, 8)) + _col(x, 9)
            + np.exp(-_col(x, 10)) - 2.4)


_BASE = {"syn1": _logit1, "syn2": _logit2, "syn3": _logit3}
_SWITCH = {"syn4": ("syn1", "syn2"), "syn5": ("syn1", "syn3"), "syn6": ("syn2", "syn3")}


def synth_logit(task: str, x: np.ndarray) -> np.ndarray:
    """The task's ``logit(x)``; P(y=1|x) = 1 / (1 + logit(x))."""
    x = np.asarray(x, dtype=np.float64)
    if task in _BASE:
        return _BASE[task](x)
    low, high = _SWITCH[task]
    return np.where(_col(x, 11) < 0, _BASE[low](x), _BASE[high](x))


def synth_probability(task: str, x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + synth_logit(task, x))


def gen_synth(spec: SynthSpec) -> Dataset:
    """x ~ N(0, I_d), y ~ Bernoulli(1 / (1 + logit(x)))."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    x = rng.standard_normal((spec.n_samples, spec.d))
    u = rng.random(spec.n_samples)
    y = (u < synth_probability(spec.task, x)).astype(np.int64)
    return Dataset(x, y, [f"x{i + 1}" for i in range(spec.d)])


_RELEVANT = {
    "syn1": {1, 2},
    "syn2": {3, 4, 5, 6},
    "syn3": {7, 8, 9, 10},
}


def relevant_features(task: str) -> set[int]:
    """1-based indices of the features the label law depends on."""
    if task in _RELEVANT:
        return set(_RELEVANT[task])
    if task not in _SWITCH:
        raise ContractError(f"unknown synthetic task {task!r}")
    low, high = _SWITCH[task]
    return _RELEVANT[low] | _RELEVANT[high] | {11}


def oracle_mask(task: str, d: int) -> np.ndarray:
    mask = np.zeros(d)
    mask[[i - 1 for i in relevant_features(task)]] = 1.0
    return mask


def dataset_checksum(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.features, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())
    return h.hexdigest()


def synth_manifest(spec: SynthSpec, ds: Dataset) -> str:
    record = {
        **asdict(spec),
        "generator": GENERATOR,
        "generator_version": GENERATOR_VERSION,
        "numpy_version": np.__version__,
        "sha256": dataset_checksum(ds),
    }
    return "\n".join(f"{k} = {json.dumps(v)}" for k, v in record.items()) + "\n"

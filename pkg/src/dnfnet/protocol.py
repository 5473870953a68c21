"""Five-fold 70/10/20 partitioning and the validation-selected grid search."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .data import Dataset, DatasetSplit, standardize
from .metrics import HIGHER_IS_BETTER
from .model import DataError

logger = logging.getLogger(__name__)

N_FOLDS = 5
PARTITION_SEED = 1
GRID_SEEDS = (1, 2, 3)


@dataclass(frozen=True)
class Partition:
    index: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def _canonical_order(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    # lexsort uses the last key as primary: labels first, then columns left to right
    keys = [features[:, j] for j in range(features.shape[1] - 1, -1, -1)] + [labels]
    return np.lexsort(keys)


def _stratified_interleave(indices: np.ndarray, labels: np.ndarray,
                           rng: np.random.Generator) -> np.ndarray:
    """Indices grouped by class (ascending), each class block shuffled."""
    blocks = []
    for c in np.unique(labels[indices]):
        members = indices[labels[indices] == c]
        blocks.append(members[rng.permutation(len(members))])
    return np.concatenate(blocks)


def _val_count(n: int, n_rest: int) -> int:
    """Validation size within one sample of both 10% of ``n`` and of
    ``n_rest - 70%`` of ``n`` (so the training split is also within one)."""
    slack = n_rest - 0.8 * n  # fold rounding, |slack| < 1
    return int(round(0.1 * n + slack / 2))


def _even_positions(length: int, count: int) -> np.ndarray:
    """``count`` evenly spread positions in ``range(length)`` (systematic sample)."""
    return np.floor((np.arange(count) + 0.5) * length / count).astype(np.intp)


def make_partitions(dataset: Dataset, seed: int = PARTITION_SEED) -> list[Partition]:
    """Five stratified partitions; fold ``i`` is the test set of partition ``i``.

    Rows are first put in a canonical order (sorted by label then feature
    values) so the result does not depend on the input row order.  Within
    each class a seeded shuffle deals samples round-robin to the folds; the
    validation set is an evenly spaced 1/8 systematic sample of the
    class-ordered, shuffled remainder, sized so all three splits are within
    one sample of 70/10/20.  Indices refer to rows of ``dataset``.
    """
    labels = np.asarray(dataset.labels)
    counts = np.bincount(labels)
    small = [c for c, n in enumerate(counts) if 0 < n < N_FOLDS]
    if small:
        raise DataError(f"classes {small} have fewer than {N_FOLDS} samples; cannot stratify")
    rng = np.random.default_rng(seed)
    canonical = _canonical_order(dataset.features, labels)
    dealt = _stratified_interleave(canonical, labels, rng)
    folds = [np.sort(dealt[i::N_FOLDS]) for i in range(N_FOLDS)]
    partitions = []
    for i in range(N_FOLDS):
        rest = np.concatenate([folds[j] for j in range(N_FOLDS) if j != i])
        rest_in_canonical = canonical[np.isin(canonical, rest)]
        ordered = _stratified_interleave(rest_in_canonical, labels, rng)
        val = np.sort(ordered[_even_positions(len(ordered), _val_count(len(labels), len(ordered)))])
        train = np.sort(np.setdiff1d(ordered, val))
        partitions.append(Partition(i, train, val, folds[i]))
    return partitions


def partition_splits(dataset: Dataset, part: Partition) -> tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    """Standardized (train, val, test) splits, statistics fitted on train."""
    def sub(idx):
        return Dataset(dataset.features[idx], dataset.labels[idx])

    classes = dataset.class_count
    train, val, test = standardize(sub(part.train), sub(part.val), sub(part.test))
    for split in (train, val, test):
        split.class_count = classes
    return train, val, test


def sem(values: Sequence[float]) -> float:
    """Standard error of the mean: sample std (ddof=1) / sqrt(count)."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return 0.0
    return float(values.std(ddof=1) / math.sqrt(len(values)))


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------
class SealedScore:
    """A test score that can only be read once selection has finished."""

    __slots__ = ("_value", "_open")

    def __init__(self, value: float):
        self._value = float(value)
        self._open = False

    def unseal(self) -> float:
        self._open = True
        return self._value

    @property
    def value(self) -> float:
        if not self._open:
            raise PermissionError("test score is sealed until validation selection completes")
        return self._value


@dataclass
class CellResult:
    """One trained (seed, partition, config) cell."""

    seed: int
    partition: int
    config_id: int
    val_score: float
    test: SealedScore | None
    error: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class SeedResult:
    seed: int
    chosen: list[int]
    val_scores: list[float]
    test_scores: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.test_scores))

    @property
    def sem(self) -> float:
        return sem(self.test_scores)


@dataclass
class GridResult:
    metric: str
    configs: list[dict]
    seeds: list[SeedResult]
    cells: list[CellResult]

    @property
    def mean(self) -> float:
        """Seed-averaged mean test score."""
        return float(np.mean([s.mean for s in self.seeds]))

    @property
    def sem(self) -> float:
        """Seed-averaged SEM over partitions."""
        return float(np.mean([s.sem for s in self.seeds]))

    @property
    def failures(self) -> list[CellResult]:
        return [c for c in self.cells if c.failed]


CellFn = Callable[[dict, int, int], tuple[float, float]]


def _run_cell(fn: CellFn, config: dict, config_id: int, partition: int, seed: int) -> CellResult:
    try:
        out = fn(config, partition, seed)
    except Exception as exc:  # noqa: BLE001 - failures are recorded per cell
        return CellResult(seed, partition, config_id, float("nan"), None, f"{type(exc).__name__}: {exc}")
    val, test, *rest = out
    extra = rest[0] if rest else {}
    return CellResult(seed, partition, config_id, float(val), SealedScore(test), extra=extra)


def select_best(cells: Sequence[CellResult], metric: str) -> CellResult:
    """Best validation score among non-failed cells; ties keep the earlier config."""
    higher = HIGHER_IS_BETTER[metric]
    best = None
    for cell in sorted(cells, key=lambda c: c.config_id):
        if cell.failed or not np.isfinite(cell.val_score):
            continue
        if best is None or (cell.val_score > best.val_score if higher else cell.val_score < best.val_score):
            best = cell
    if best is None:
        raise RuntimeError("every configuration failed on this partition")
    return best


def grid_search(
    cell_fn: CellFn,
    configs: Sequence[dict],
    partitions: Sequence[int],
    metric: str,
    seeds: Sequence[int] = GRID_SEEDS,
    jobs: int = 1,
) -> GridResult:
    """Train every config on every partition (per seed), select by validation,
    report the selected config's test score, and aggregate mean/SEM.

    ``cell_fn(config, partition, seed)`` returns ``(val_score, test_score)``
    (optionally a third ``dict`` of extras).  With ``jobs > 1`` cells run in a
    process pool; ``cell_fn`` must then be picklable.  Results are merged in
    (seed, partition, config) order, so the output does not depend on ``jobs``.
    """
    if not configs:
        raise ValueError("grid_search needs at least one configuration")
    tasks = [(seed, p, cid) for seed in seeds for p in partitions for cid in range(len(configs))]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, cell_fn, configs[cid], cid, p, seed) for seed, p, cid in tasks]
            cells = [f.result() for f in futures]
    else:
        cells = [_run_cell(cell_fn, configs[cid], cid, p, seed) for seed, p, cid in tasks]

    for cell in cells:
        if cell.failed:
            logger.warning("config %d failed on partition %d (seed %d): %s",
                           cell.config_id, cell.partition, cell.seed, cell.error)

    seed_results = []
    for seed in seeds:
        chosen, vals, tests = [], [], []
        for p in partitions:
            group = [c for c in cells if c.seed == seed and c.partition == p]
            best = select_best(group, metric)
            chosen.append(best.config_id)
            vals.append(best.val_score)
            tests.append(best.test.unseal())
        seed_results.append(SeedResult(seed, chosen, vals, tests))
    # selection is final, so every cell's test score may now be reported
    for cell in cells:
        if cell.test is not None:
            cell.test.unseal()
    return GridResult(metric, list(configs), seed_results, cells)

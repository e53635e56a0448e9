"""Reinforcement sample learning: extra epochs for batches that underperform.

Each epoch trains once on every batch of a fixed random partition, computes the
mean batch error C, and then gives every batch whose error exceeds C some
extra update passes, the count coming from a piecewise map of the excess.
With a map that is zero everywhere this reduces to conventional training.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .network import Model, predict_batch, train_step

log = logging.getLogger(__name__)


class TrainingError(FloatingPointError):
    """Numeric failure during training, with epoch/batch context in the message."""


class Dataset(NamedTuple):
    images: np.ndarray  # (n, 1, H, W)
    labels: np.ndarray  # (n,) in {0, 1}


@dataclass(frozen=True)
class BatchPartition:
    batches: Tuple[np.ndarray, ...]
    seed: int

    def __post_init__(self):
        if not self.batches:
            raise ValueError("partition has no batches")
        joined = np.concatenate(self.batches)
        if np.unique(joined).size != joined.size:
            raise ValueError("batches overlap")
        if not np.array_equal(np.sort(joined), np.arange(joined.size)):
            raise ValueError("batches do not cover 0..n-1")

    def __len__(self) -> int:
        return len(self.batches)

    @property
    def sizes(self) -> List[int]:
        return [len(b) for b in self.batches]


def partition_batches(dataset_size: int, batch_size: int, seed: int) -> BatchPartition:
    """Shuffle ``range(dataset_size)`` with a seeded generator and cut it into batches.

    The last batch may be smaller. A batch size above the dataset size gives a
    single batch.
    """
    if dataset_size < 1 or batch_size < 1:
        raise ValueError("dataset_size and batch_size must be >= 1")
    if batch_size > dataset_size:
        log.info("batch size %d exceeds dataset size %d; using one batch", batch_size, dataset_size)
    order = np.random.default_rng(seed).permutation(dataset_size)
    return BatchPartition(tuple(order[i:i + batch_size] for i in range(0, dataset_size, batch_size)), seed)


@dataclass(frozen=True)
class BatchErrorReport:
    epoch: int
    errors: Tuple[float, ...]

    @property
    def n(self) -> int:
        return len(self.errors)


def compute_threshold(report) -> float:
    """Arithmetic mean of the batch error rates.

    Summed exactly (as rationals) and rounded once, so the result always lies
    between the smallest and largest error and equals ``e`` when all errors are ``e``.
    """
    errors = report.errors if isinstance(report, BatchErrorReport) else tuple(report)
    if not errors:
        raise ValueError("no batch errors to average")
    return float(sum(Fraction(e) for e in errors) / len(errors))


@dataclass(frozen=True)
class PiecewiseEpochMap:
    """Remedial epochs as a step function of the excess error d = Er - C.

    ``epoch_counts[k]`` applies on ``(breakpoints[k-1], breakpoints[k]]`` (with
    breakpoints[-1] taken as 0); the last count covers everything above the
    last breakpoint. d <= 0 always maps to 0.
    """

    breakpoints: Tuple[float, ...] = (0.05, 0.15)
    epoch_counts: Tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        bps = tuple(float(b) for b in self.breakpoints)
        counts = tuple(int(c) for c in self.epoch_counts)
        object.__setattr__(self, "breakpoints", bps)
        object.__setattr__(self, "epoch_counts", counts)
        if len(counts) != len(bps) + 1:
            raise ValueError("need exactly one more epoch count than breakpoints")
        if any(b <= 0 for b in bps) or any(b2 <= b1 for b1, b2 in zip(bps, bps[1:])):
            raise ValueError(f"breakpoints must be positive and strictly ascending: {bps}")
        if any(c < 0 for c in counts) or any(c2 < c1 for c1, c2 in zip(counts, counts[1:])):
            raise ValueError(f"epoch counts must be non-negative and non-decreasing: {counts}")

    @classmethod
    def zero(cls) -> "PiecewiseEpochMap":
        return cls((), (0,))

    @classmethod
    def parse(cls, text: str) -> "PiecewiseEpochMap":
        """Parse ``"0.05:1, 0.15:2, inf:3"`` (upper bound of d : epochs)."""
        bps, counts = [], []
        items = [item.strip() for item in text.split(",") if item.strip()]
        for i, item in enumerate(items):
            bound, sep, count = item.partition(":")
            if not sep:
                raise ValueError(f"bad piecewise map item {item!r}; expected bound:epochs")
            bound = bound.strip().lower()
            if i == len(items) - 1:
                if bound not in ("inf", "+inf"):
                    raise ValueError("the last piecewise map item must have bound inf")
            else:
                bps.append(float(bound))
            counts.append(int(count))
        if not counts:
            raise ValueError("empty piecewise map")
        return cls(tuple(bps), tuple(counts))

    def format(self) -> str:
        bounds = [repr(b) for b in self.breakpoints] + ["inf"]
        return ", ".join(f"{b}:{c}" for b, c in zip(bounds, self.epoch_counts))

    def __call__(self, d: float) -> int:
        if d <= 0:
            return 0
        for bound, count in zip(self.breakpoints, self.epoch_counts):
            if d <= bound:
                return count
        return self.epoch_counts[-1]

    @property
    def is_zero(self) -> bool:
        return self.epoch_counts[-1] == 0


def remedial_epochs(er: float, c: float, epoch_map: PiecewiseEpochMap) -> int:
    """Extra passes for a batch with error ``er`` when the epoch mean is ``c``."""
    return epoch_map(er - c)


@dataclass(frozen=True)
class Termination:
    """Stop after ``max_epochs``; optionally earlier.

    ``plateau_window``: stop once the best training error of the last
    ``plateau_window`` epochs is not at least ``plateau_delta`` below the best
    before them. ``target_train_error``: stop as soon as the epoch's training
    error is at or below this value.
    """

    max_epochs: int = 150
    plateau_window: Optional[int] = None
    plateau_delta: float = 0.001
    target_train_error: Optional[float] = None

    def should_stop(self, train_errors: Sequence[float]) -> bool:
        if len(train_errors) >= self.max_epochs:
            return True
        if self.target_train_error is not None and train_errors and train_errors[-1] <= self.target_train_error:
            return True
        w = self.plateau_window
        if w and len(train_errors) > w:
            before = min(train_errors[:-w])
            recent = min(train_errors[-w:])
            if before - recent < self.plateau_delta:
                return True
        return False


@dataclass
class EpochRecord:
    epoch: int
    batch_errors: Tuple[float, ...]
    threshold: float
    remedial: Dict[int, int]  # batch index -> extra passes this epoch (non-zero only)
    update_passes: int  # cumulative
    remedial_epochs_total: int  # cumulative
    train_error: float
    val_error: float
    mean_loss: float
    wall_clock_s: float


@dataclass
class RslRunLog:
    mode: str
    batch_sizes: List[int]
    records: List[EpochRecord] = field(default_factory=list)

    @property
    def train_errors(self) -> List[float]:
        return [r.train_error for r in self.records]

    @property
    def val_errors(self) -> List[float]:
        return [r.val_error for r in self.records]


def error_rate(model: Model, data: Dataset) -> float:
    if len(data.labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.count_nonzero(predict_batch(model, data.images) != data.labels)) / len(data.labels)


def _step(model, data, batch, learning_rate, epoch, index, phase):
    try:
        # overflow is detected explicitly by train_step; keep numpy quiet about it
        with np.errstate(over="ignore", invalid="ignore"):
            _, err, loss = train_step(model, data.images[batch], data.labels[batch], learning_rate)
    except FloatingPointError as exc:
        raise TrainingError(f"epoch {epoch}, batch {index} ({phase}): {exc}") from exc
    return err, loss


def _train(
    model: Model,
    data: Dataset,
    partition: BatchPartition,
    epoch_map: Optional[PiecewiseEpochMap],
    learning_rate: float,
    termination: Termination,
    validation: Optional[Dataset],
    on_epoch: Optional[Callable[[EpochRecord], None]],
    mode: str,
):
    if len(data.labels) != partition_size(partition):
        raise ValueError(f"partition covers {partition_size(partition)} samples, dataset has {len(data.labels)}")
    run = RslRunLog(mode, partition.sizes)
    passes = remedial_total = 0
    start = time.perf_counter()
    n = len(data.labels)
    while True:
        epoch = len(run.records) + 1
        errors, losses, wrong = [], [], 0
        for i, batch in enumerate(partition.batches):
            err, loss = _step(model, data, batch, learning_rate, epoch, i, "main pass")
            errors.append(err)
            losses.append(loss)
            wrong += round(err * len(batch))
        passes += len(partition)
        c = compute_threshold(errors)

        remedial: Dict[int, int] = {}
        if epoch_map is not None:
            for i, batch in enumerate(partition.batches):
                if errors[i] > c:
                    extra = remedial_epochs(errors[i], c, epoch_map)
                    if extra:
                        remedial[i] = extra
                    for _ in range(extra):
                        _step(model, data, batch, learning_rate, epoch, i, "remedial")
                    passes += extra
                    remedial_total += extra

        try:
            with np.errstate(over="ignore", invalid="ignore"):
                val_error = error_rate(model, validation) if validation is not None else math.nan
        except FloatingPointError as exc:
            raise TrainingError(f"epoch {epoch}, validation: {exc}") from exc
        record = EpochRecord(
            epoch=epoch,
            batch_errors=tuple(errors),
            threshold=c,
            remedial=remedial,
            update_passes=passes,
            remedial_epochs_total=remedial_total,
            train_error=wrong / n,
            val_error=val_error,
            mean_loss=float(np.mean(losses)),
            wall_clock_s=time.perf_counter() - start,
        )
        run.records.append(record)
        log.info(
            "%s epoch %d: train %.4f val %.4f C %.4f remedial %d passes %d",
            mode, epoch, record.train_error, record.val_error, c, sum(remedial.values()), passes,
        )
        if on_epoch is not None:
            on_epoch(record)
        if termination.should_stop(run.train_errors):
            return model, run


def partition_size(partition: BatchPartition) -> int:
    return sum(partition.sizes)


def rsl_train(
    model: Model,
    data: Dataset,
    partition: BatchPartition,
    epoch_map: PiecewiseEpochMap,
    learning_rate: float,
    termination: Termination = Termination(),
    validation: Optional[Dataset] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
):
    """Train with remedial passes; returns ``(model, RslRunLog)``.

    Per epoch: one step per batch in partition order; C = mean batch error of
    that pass; every batch with error strictly above C then gets
    ``epoch_map(error - C)`` further steps, in partition order.
    """
    return _train(model, data, partition, epoch_map, learning_rate, termination, validation, on_epoch, "rsl")


def conventional_train(
    model: Model,
    data: Dataset,
    partition: BatchPartition,
    learning_rate: float,
    termination: Termination = Termination(),
    validation: Optional[Dataset] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
):
    """Plain epoch training over the same fixed partition, without remediation."""
    return _train(model, data, partition, None, learning_rate, termination, validation, on_epoch, "conventional")

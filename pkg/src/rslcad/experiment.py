"""End-to-end runs: load or synthesize data, preprocess, train, log metrics, checkpoint."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import RunConfig
from .manifest import DatasetManifest
from .network import Model, build_table1_network, init_model, save_checkpoint
from .pgm import read_pgm
from .preprocess import GrayImage, PreprocessError, preprocess_pipeline
from .rsl import (
    Dataset,
    EpochRecord,
    RslRunLog,
    TrainingError,
    conventional_train,
    error_rate,
    partition_batches,
    rsl_train,
)
from .synthetic import generate_synthetic

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_error", "val_error", "remedial_epochs_total", "update_passes", "wall_clock_s"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ExperimentError(RuntimeError):
    """Stage-tagged failure of a run; ``exit_code`` follows the CLI convention."""

    def __init__(self, stage: str, message: str, exit_code: int):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = exit_code


@dataclass
class ExperimentResult:
    metrics_path: Path
    checkpoint_path: Path
    log: RslRunLog
    model: Model


def format_metrics_row(record: EpochRecord, wall_clock: bool = True) -> str:
    return "{},{:.6f},{:.6f},{},{},{:.3f}\n".format(
        record.epoch,
        record.train_error,
        record.val_error,
        record.remedial_epochs_total,
        record.update_passes,
        record.wall_clock_s if wall_clock else 0.0,
    )


def load_images(manifest: DatasetManifest, target: Tuple[int, int]) -> Dataset:
    """Read and preprocess every manifest entry into a tensor dataset."""
    tensors = []
    for entry in manifest:
        try:
            image = GrayImage(read_pgm(entry.path), entry.laterality)
            tensors.append(preprocess_pipeline(image, target))
        except PreprocessError as exc:
            raise PreprocessError(exc.stage, f"{entry.path}: {exc}") from exc
    images = np.stack(tensors) if tensors else np.zeros((0, 1) + tuple(target))
    return Dataset(images, np.array([e.label for e in manifest], dtype=np.int64))


def _synthetic_data(config: RunConfig) -> Tuple[Dataset, Dataset]:
    spec = config.synthetic_spec()
    out = []
    for stream, per_class in ((0, config.train_per_class), (1, config.val_per_class)):
        s = generate_synthetic(spec, per_class, stream=stream)
        images = np.stack([preprocess_pipeline(img, config.input_size) for img in s.images])
        out.append(Dataset(images, np.array(s.labels, dtype=np.int64)))
    return out[0], out[1]


def prepare_data(config: RunConfig) -> Tuple[Dataset, Dataset]:
    if config.manifest is None:
        return _synthetic_data(config)
    from .manifest import load_manifest

    manifest = load_manifest(config.manifest)
    train = load_images(manifest.split("train"), config.input_size)
    val = load_images(manifest.split("val"), config.input_size)
    if len(train.labels) == 0:
        raise ValueError(f"{config.manifest}: no training entries")
    return train, val


def run_experiment(config: RunConfig, out_dir: Union[str, Path]) -> ExperimentResult:
    """Preprocess, build the network, train in the configured mode, write outputs.

    Writes ``metrics.csv`` (flushed every epoch), ``model.ckpt`` and the
    effective ``config.txt`` under ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config.to_text())

    try:
        train, val = prepare_data(config)
    except (OSError, ValueError) as exc:
        raise ExperimentError("data", str(exc), EXIT_DATA) from exc

    try:
        spec = build_table1_network(config.input_size)
    except ValueError as exc:
        raise ExperimentError("build", str(exc), EXIT_USAGE) from exc
    model = init_model(spec, config.seed)
    partition = partition_batches(len(train.labels), config.batch_size, config.seed)
    validation = val if len(val.labels) else None

    metrics_path = out_dir / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")
        fh.flush()

        def on_epoch(record: EpochRecord) -> None:
            fh.write(format_metrics_row(record, config.record_wall_clock))
            fh.flush()

        try:
            if config.mode == "rsl":
                model, run = rsl_train(
                    model, train, partition, config.piecewise_map, config.learning_rate,
                    config.termination(), validation, on_epoch,
                )
            else:
                model, run = conventional_train(
                    model, train, partition, config.learning_rate,
                    config.termination(), validation, on_epoch,
                )
        except TrainingError as exc:
            raise ExperimentError("train", str(exc), EXIT_NUMERIC) from exc

    checkpoint_path = out_dir / "model.ckpt"
    save_checkpoint(model, checkpoint_path)
    return ExperimentResult(metrics_path, checkpoint_path, run, model)


def evaluate(model: Model, manifest: DatasetManifest) -> float:
    """Fraction of manifest images misclassified by ``model``."""
    if len(manifest) == 0:
        raise ValueError("cannot evaluate on an empty manifest")
    return error_rate(model, load_images(manifest, model.spec.input_size))


# ---------------------------------------------------------------------------
# metrics CSV reading and run comparison


class MetricsSchemaError(ValueError):
    pass


@dataclass
class MetricsRow:
    epoch: int
    train_error: float
    val_error: float
    remedial_epochs_total: int
    update_passes: int
    wall_clock_s: float


def read_metrics(path: Union[str, Path]) -> List[MetricsRow]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != METRICS_HEADER:
        raise MetricsSchemaError(f"{path}: header must be {','.join(METRICS_HEADER)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(METRICS_HEADER):
            raise MetricsSchemaError(f"{path}:{lineno}: expected {len(METRICS_HEADER)} fields")
        try:
            out.append(MetricsRow(int(row[0]), float(row[1]), float(row[2]), int(row[3]), int(row[4]), float(row[5])))
        except ValueError as exc:
            raise MetricsSchemaError(f"{path}:{lineno}: {exc}") from exc
        if out[-1].epoch != len(out):
            raise MetricsSchemaError(f"{path}:{lineno}: epochs must run 1, 2, 3, ...")
    return out


@dataclass
class RunSummary:
    name: str
    epochs: int
    epochs_to_threshold: Optional[int]  # None: threshold not reached
    final_train_error: float
    final_val_error: float
    total_update_passes: int


@dataclass
class Comparison:
    threshold: float
    a: RunSummary
    b: RunSummary

    @property
    def epoch_delta(self) -> Optional[int]:
        if self.a.epochs_to_threshold is None or self.b.epochs_to_threshold is None:
            return None
        return self.b.epochs_to_threshold - self.a.epochs_to_threshold

    def report(self) -> str:
        def reached(s: RunSummary) -> str:
            return str(s.epochs_to_threshold) if s.epochs_to_threshold is not None else "not reached"

        lines = [f"train error threshold: {self.threshold:g}"]
        lines.append(f"{'':24}{'A':>14}{'B':>14}")
        lines.append(f"{'run':24}{self.a.name:>14}{self.b.name:>14}")
        lines.append(f"{'epochs run':24}{self.a.epochs:>14}{self.b.epochs:>14}")
        lines.append(f"{'epochs to threshold':24}{reached(self.a):>14}{reached(self.b):>14}")
        lines.append(f"{'final train error':24}{self.a.final_train_error:>14.4f}{self.b.final_train_error:>14.4f}")
        lines.append(f"{'final val error':24}{self.a.final_val_error:>14.4f}{self.b.final_val_error:>14.4f}")
        lines.append(f"{'total update passes':24}{self.a.total_update_passes:>14}{self.b.total_update_passes:>14}")
        delta = self.epoch_delta
        lines.append(f"epoch delta (B - A): {delta if delta is not None else 'n/a'}")
        return "\n".join(lines) + "\n"


def summarize(rows: Sequence[MetricsRow], threshold: float, name: str = "") -> RunSummary:
    if not rows:
        raise MetricsSchemaError(f"{name or 'metrics'}: no epoch rows")
    hit = next((r.epoch for r in rows if r.train_error <= threshold), None)
    last = rows[-1]
    return RunSummary(name, len(rows), hit, last.train_error, last.val_error, last.update_passes)


def compare_runs(csv_a: Union[str, Path], csv_b: Union[str, Path], threshold: float = 0.20) -> Comparison:
    return Comparison(
        threshold,
        summarize(read_metrics(csv_a), threshold, Path(csv_a).parent.name or str(csv_a)),
        summarize(read_metrics(csv_b), threshold, Path(csv_b).parent.name or str(csv_b)),
    )

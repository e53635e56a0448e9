"""Command line entry point: ``rslcad {generate,preprocess,train,eval,compare}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import ConfigError, RunConfig, load_config
from .experiment import (
    EXIT_DATA,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_USAGE,
    ExperimentError,
    MetricsSchemaError,
    compare_runs,
    evaluate,
    run_experiment,
)
from .manifest import ManifestError, load_manifest, write_manifest
from .network import load_checkpoint
from .pgm import read_pgm, write_pgm
from .preprocess import GrayImage, PreprocessError, preprocess_pipeline
from .synthetic import generate_synthetic

log = logging.getLogger("rslcad")


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError("--out DIR is required")
    return Path(args.out)


def cmd_generate(args) -> int:
    config = _config(args)
    out = _require_out(args)
    spec = config.synthetic_spec()
    train = generate_synthetic(spec, config.train_per_class, stream=0).write(out / "images", "train")
    val = generate_synthetic(spec, config.val_per_class, stream=1).write(out / "images", "val")
    write_manifest(train + val, out / "manifest.csv")
    print(f"wrote {len(train) + len(val)} images and {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    config = _config(args)
    out = _require_out(args)
    manifest_path = args.manifest or config.manifest
    if manifest_path is None:
        raise UsageError("preprocess needs --manifest or a config with manifest set")
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for i, entry in enumerate(load_manifest(manifest_path)):
        try:
            tensor = preprocess_pipeline(GrayImage(read_pgm(entry.path), entry.laterality), config.input_size)
        except PreprocessError as exc:
            raise PreprocessError(exc.stage, f"{entry.path}: {exc}") from exc
        pixels = (tensor[0] * 255.0).round().clip(0, 255).astype("uint8")
        write_pgm(out / f"{i:05d}_{Path(entry.path).stem}.pgm", pixels)
        count += 1
    print(f"wrote {count} crops to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config(args)
    result = run_experiment(config, _require_out(args))
    last = result.log.records[-1]
    print(
        f"{config.mode}: {len(result.log.records)} epochs, train error {last.train_error:.4f}, "
        f"val error {last.val_error:.4f}, update passes {last.update_passes}"
    )
    print(f"metrics: {result.metrics_path}\ncheckpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    err = evaluate(model, load_manifest(args.manifest))
    print(f"error rate: {err:.6f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    report = compare_runs(args.csv_a, args.csv_b, args.threshold).report()
    print(report, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.txt").write_text(report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value run configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="rslcad", description="Mammogram CNN training with remedial batch scheduling.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset and manifest")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", parents=[common], help="segment and crop manifest images to PGM")
    p.add_argument("--manifest", type=Path)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="run one experiment")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="error rate of a checkpoint on a manifest")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("manifest", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", parents=[common], help="compare two metrics CSVs")
    p.add_argument("csv_a", type=Path)
    p.add_argument("csv_b", type=Path)
    p.add_argument("--threshold", type=float, default=0.20)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"rslcad: [usage] {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ExperimentError as exc:
        print(f"rslcad: {exc}", file=sys.stderr)
        return exc.exit_code
    except PreprocessError as exc:
        print(f"rslcad: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ManifestError, MetricsSchemaError) as exc:
        print(f"rslcad: [data] {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"rslcad: [numeric] {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"rslcad: [data] {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

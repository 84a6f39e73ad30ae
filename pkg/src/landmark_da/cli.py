"""Command-line entry point: ``landmark-da <verb> ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
Failures print a single ``error: <kind>: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .checkpoint import CheckpointError, load_checkpoint
from .data import (
    ANNOTATIONS_NAME,
    DataError,
    image_dimensions,
    read_image,
    generate_synthetic,
    load_dataset,
    load_dataset_dir,
    write_dataset,
)
from .evaluate import evaluate, label_sweep
from .gradcheck import check_all
from .trainer import TrainingError, load_config, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class GradCheckFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="landmark-da", description="Two-step domain adaptation for facial landmarks.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset directory")
    p.add_argument("--domain", choices=("source", "target"), required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--annotations")
    p.add_argument("--report", required=True)
    p.add_argument("--csv")

    p = sub.add_parser("sweep", help="train and evaluate over labeled-target counts")
    p.add_argument("--config", required=True)
    p.add_argument("--counts", default="0,10,50,100")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--report", required=True)

    p = sub.add_parser("predict", help="print six landmark pixel coordinates for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _load_training_data(cfg):
    spec = cfg.architecture()
    if not cfg.source:
        raise DataError("config key 'source' (labeled dataset directory) is required")
    source = load_dataset_dir(cfg.source, spec.input_size, spec.input_channels, labeled=True)
    target = None
    if cfg.target:
        target = load_dataset_dir(cfg.target, spec.input_size, spec.input_channels, labeled=False)
    pool = None
    if cfg.target_labeled:
        pool = load_dataset_dir(cfg.target_labeled, spec.input_size, spec.input_channels, labeled=True)
    return source, target, pool


def _cmd_synth(args):
    ds = generate_synthetic(args.domain, args.count, args.seed, args.size)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} {args.domain} images to {args.out}")


def _cmd_train(args):
    cfg = load_config(args.config, args.override)
    source, target, pool = _load_training_data(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    model, log = train(cfg, source, target, pool, out_dir=out, log_path=out / "train_log.jsonl")
    last = log.records[-1]
    print(f"trained {last['step']} steps; final l_rec={last['l_rec']} l_reg={last['l_reg']}; "
          f"checkpoint {out / 'final.ckpt'}")
    if cfg.test:
        spec = cfg.architecture()
        test = load_dataset_dir(cfg.test, spec.input_size, spec.input_channels, labeled=True)
        report = evaluate(model, test)
        report.write(out / "eval_report.json", out / "roc.csv")
        print(f"test AUC {report.auc:.3f}, precision@{report.radius_px:g}px {report.precision:.4f}")


def _cmd_eval(args):
    model = load_checkpoint(args.model)
    spec = model.spec
    ann = args.annotations or str(Path(args.data) / ANNOTATIONS_NAME)
    data = load_dataset(args.data, ann, size=spec.input_size, channels=spec.input_channels)
    report = evaluate(model, data)
    report.write(args.report, args.csv)
    print(f"AUC {report.auc:.3f}, precision@{report.radius_px:g}px {report.precision:.4f} over {report.count} images")


def _cmd_sweep(args):
    cfg = load_config(args.config, args.override)
    try:
        counts = [int(c) for c in args.counts.split(",") if c.strip()]
    except ValueError as exc:
        raise UsageError(f"--counts must be comma-separated integers ({exc})") from exc
    source, target, pool = _load_training_data(cfg)
    if target is None or pool is None:
        raise DataError("sweep needs 'target' and 'target_labeled' in the config")
    result = label_sweep(cfg, source, target, pool, counts, out_dir=Path(cfg.out_dir) / "sweep")
    Path(args.report).write_text(result.to_json() + "\n", encoding="utf-8")
    for count, report in result.entries:
        print(f"count={count} AUC={report.auc:.3f} precision={report.precision:.4f}")


def _cmd_predict(args):
    model = load_checkpoint(args.model)
    spec = model.spec
    path = Path(args.image)
    if not path.is_file():
        raise DataError(f"{path}: image not found")
    w, h = image_dimensions(path)
    image = read_image(path, spec.input_size, spec.input_channels)
    pred = model.predict(image[None])[0]
    xs = (pred[0::2] + 1.0) * (w - 1) / 2.0
    ys = (pred[1::2] + 1.0) * (h - 1) / 2.0
    coords = np.empty(6)
    coords[0::2], coords[1::2] = xs, ys
    print(" ".join(f"{c:.4f}" for c in coords))


def _cmd_gradcheck(args):
    results = check_all(args.seed)
    for r in results:
        print(r.line())
    failed = [r.op for r in results if not r.passed]
    if failed:
        raise GradCheckFailure(f"gradient check failed for {', '.join(failed)}")


COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "predict": _cmd_predict,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        COMMANDS[args.verb](args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, TrainingError, GradCheckFailure) as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    return EXIT_OK


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()

"""Landmark evaluation: pixel errors, precision at radius, ROC curve and AUC."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import LANDMARK_NAMES, DataError, Dataset, to_pixels
from .netdef import ModelState
from .trainer import TrainConfig, train

ROC_STEPS = 32  # grid points beyond zero, up to half the image size
DEFAULT_COUNTS = (0, 10, 50, 100)


def default_radius(image_size: int) -> float:
    """10% of the image size, floored (3 px at 32x32)."""
    return float(math.floor(0.10 * image_size))


def landmark_error(pred, truth, image_size: int) -> np.ndarray:
    """Euclidean pixel distance per landmark; accepts [6] or [N, 6]."""
    p = to_pixels(np.asarray(pred, dtype=np.float64), image_size)
    t = to_pixels(np.asarray(truth, dtype=np.float64), image_size)
    if p.shape != t.shape or p.shape[-1] % 2:
        raise ValueError(f"prediction {p.shape} and truth {t.shape} must match and hold (x, y) pairs")
    d = (p - t).reshape(*p.shape[:-1], -1, 2)
    return np.hypot(d[..., 0], d[..., 1])


def precision_at_radius(errors, radius: float) -> float:
    """Fraction of detections whose error is within ``radius`` (inclusive)."""
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if e.size == 0:
        raise ValueError("no errors to score")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    return float(np.count_nonzero(e <= radius)) / e.size


def roc_thresholds(image_size: int) -> np.ndarray:
    return np.arange(ROC_STEPS + 1) / 64.0 * image_size


def roc_auc(errors, image_size: int) -> tuple[list[tuple[float, float]], float]:
    """Precision-vs-radius curve on the fixed grid and its normalized area (0-100)."""
    e = np.sort(np.asarray(errors, dtype=np.float64).reshape(-1))
    if e.size == 0:
        raise ValueError("no errors to score")
    t = roc_thresholds(image_size)
    prec = np.searchsorted(e, t, side="right") / e.size
    area = float(np.sum((prec[1:] + prec[:-1]) * np.diff(t)) / 2.0)
    auc = 100.0 * area / (t[-1] - t[0])
    return [(float(a), float(b)) for a, b in zip(t, prec)], auc


@dataclass
class EvalReport:
    dataset: str
    count: int
    radius_px: float
    per_landmark: dict[str, float]
    precision: float
    roc: list[tuple[float, float]]
    auc: float
    mean_error_px: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        raw["roc"] = [tuple(p) for p in raw["roc"]]
        return cls(**raw)

    def write(self, path, csv_path=None) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")
        if csv_path is not None:
            write_roc_csv(self.roc, csv_path)


def write_roc_csv(curve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold_px", "precision"])
        for t, p in curve:
            writer.writerow([repr(t), repr(p)])


def report_from_errors(errors: np.ndarray, image_size: int, tag: str = "") -> EvalReport:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.ndim != 2 or errors.shape[0] == 0:
        raise ValueError("errors must be a non-empty [N, landmarks] array")
    radius = default_radius(image_size)
    names = LANDMARK_NAMES if errors.shape[1] == len(LANDMARK_NAMES) else tuple(
        f"landmark{i}" for i in range(errors.shape[1]))
    per = {name: precision_at_radius(errors[:, i], radius) for i, name in enumerate(names)}
    curve, auc = roc_auc(errors, image_size)
    return EvalReport(
        dataset=tag,
        count=int(errors.shape[0]),
        radius_px=radius,
        per_landmark=per,
        precision=precision_at_radius(errors, radius),
        roc=curve,
        auc=auc,
        mean_error_px=float(errors.mean()),
    )


def evaluate_predictions(pred: np.ndarray, dataset: Dataset) -> EvalReport:
    if not dataset.labeled:
        raise DataError("evaluation needs a labeled dataset")
    errors = landmark_error(pred, dataset.landmarks, dataset.size)
    return report_from_errors(errors, dataset.size, dataset.tag)


def evaluate(model: ModelState, dataset: Dataset) -> EvalReport:
    """Score the encoder+regressor on an un-augmented labeled dataset."""
    if not dataset.labeled:
        raise DataError("evaluation needs a labeled dataset")
    return evaluate_predictions(model.predict(dataset.images), dataset)


# ---------------------------------------------------------------------------
# label-count sweep


@dataclass
class SweepResult:
    entries: list[tuple[int, EvalReport]] = field(default_factory=list)

    def auc(self, count: int) -> float:
        return dict(self.entries)[count].auc

    def to_json(self) -> str:
        payload = [{"target_labeled_count": c, "report": asdict(r)} for c, r in self.entries]
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SweepResult":
        out = []
        for item in json.loads(text):
            out.append((item["target_labeled_count"], EvalReport.from_json(json.dumps(item["report"]))))
        return cls(out)


def split_labeled(pool: Dataset, seed: int, test_fraction: float = 0.2) -> tuple[Dataset, Dataset]:
    """Seed-deterministic train/test split of a labeled pool."""
    order = np.random.default_rng([seed, 2020]).permutation(len(pool))
    n_test = max(1, int(round(test_fraction * len(pool))))
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
    return pool.subset(train_idx, pool.tag + "-train"), pool.subset(test_idx, pool.tag + "-test")


def label_sweep(
    config: TrainConfig,
    source: Dataset,
    target: Dataset,
    target_pool: Dataset,
    counts: Sequence[int] = DEFAULT_COUNTS,
    test_fraction: float = 0.2,
    out_dir=None,
) -> SweepResult:
    """Train one two-step model per labeled-target count; score on a held-out split."""
    counts = [int(c) for c in counts]
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise ValueError("counts must be strictly increasing")
    if not target_pool.labeled:
        raise DataError("the target pool must be labeled")
    train_pool, test_split = split_labeled(target_pool, config.seed, test_fraction)
    if counts and counts[-1] > len(train_pool):
        raise DataError(f"labeled target pool too small: {len(train_pool)} training samples < {counts[-1]}")
    result = SweepResult()
    for count in counts:
        cfg = replace(config, target_labeled_count=count)
        sub_dir = None if out_dir is None else Path(out_dir) / f"count_{count:04d}"
        model, _ = train(cfg, source, target, train_pool, out_dir=sub_dir)
        result.entries.append((count, evaluate(model, test_split)))
    return result

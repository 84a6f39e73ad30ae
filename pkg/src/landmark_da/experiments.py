"""Desk-scale experiments on synthetic faces.

Each function builds its data from seeds, trains, and returns an
``ExperimentResult`` carrying the summary numbers plus the serialized
checkpoints, so repeated runs can be compared byte for byte.
"""
from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import to_bytes
from .data import Dataset, generate_synthetic
from .evaluate import DEFAULT_COUNTS, evaluate, label_sweep, landmark_error, split_labeled
from .trainer import TrainConfig, train


@dataclass
class ExperimentResult:
    name: str
    metrics: dict
    checkpoints: dict[str, bytes] = field(default_factory=dict, repr=False)
    seconds: float = 0.0


@dataclass(frozen=True)
class DomainSetup:
    """Synthetic source -> target task shared by the adaptation and sweep runs."""

    n_source: int = 500
    n_target: int = 500
    n_pool: int = 500
    test_fraction: float = 0.2
    seed: int = 0

    def build(self) -> tuple[Dataset, Dataset, Dataset, Dataset]:
        """Return (source, unlabeled target, labeled target train pool, target test split)."""
        source = generate_synthetic("source", self.n_source, self.seed)
        target = generate_synthetic("target", self.n_target, self.seed).unlabeled()
        # the labeled pool comes from a disjoint seed so no test face is ever reconstructed
        pool = generate_synthetic("target", self.n_pool, self.seed + 1000)
        train_pool, test = split_labeled(pool, self.seed, self.test_fraction)
        return source, target, train_pool, test


DESK_CONFIG = TrainConfig(epochs=30, batch_size=128, width_scale=0.1, seed=0)


def overfit(seed: int = 0, steps: int = 2000, width_scale: float = 0.25,
            learning_rate: float = 3e-4) -> ExperimentResult:
    """Fit 8 labeled source faces with the supervised branch alone."""
    start = time.perf_counter()
    data = generate_synthetic("source", 8, seed)
    cfg = TrainConfig(epochs=steps, batch_size=8, learning_rate=learning_rate, width_scale=width_scale,
                      seed=seed, mode="supervised_only", augment=False)
    model, log = train(cfg, data)
    errors = landmark_error(model.predict(data.images), data.landmarks, data.size)
    metrics = {
        "steps": model.step,
        "mean_error_px": float(errors.mean()),
        "max_error_px": float(errors.max()),
        "final_l_reg": log.records[-1]["l_reg"],
    }
    return ExperimentResult("overfit", metrics, {"model": to_bytes(model)}, time.perf_counter() - start)


def reconstruction_trend(seed: int = 0, epochs: int = 50, width_scale: float = 0.25,
                         n_source: int = 500, n_target: int = 500) -> ExperimentResult:
    """Two-step training; compare mean L_rec over the first and last 10% of steps."""
    start = time.perf_counter()
    source = generate_synthetic("source", n_source, seed)
    target = generate_synthetic("target", n_target, seed).unlabeled()
    cfg = replace(DESK_CONFIG, epochs=epochs, width_scale=width_scale, seed=seed)
    model, log = train(cfg, source, target)
    l_rec = log.losses("l_rec")
    k = max(1, len(l_rec) // 10)
    first, last = float(np.mean(l_rec[:k])), float(np.mean(l_rec[-k:]))
    metrics = {
        "steps": len(l_rec),
        "window": k,
        "first_mean_l_rec": first,
        "last_mean_l_rec": last,
        "ratio": last / first,
        "l_rec": l_rec.tolist(),
    }
    return ExperimentResult("reconstruction_trend", metrics, {"model": to_bytes(model)},
                            time.perf_counter() - start)


def adaptation(config: TrainConfig = DESK_CONFIG, setup: DomainSetup = DomainSetup()) -> ExperimentResult:
    """Two-step model vs supervised-only ConvNet, both without target labels."""
    start = time.perf_counter()
    source, target, _, test = setup.build()
    config = replace(config, seed=setup.seed, target_labeled_count=0)
    metrics, ckpts = {}, {}
    for mode in ("two_step", "supervised_only"):
        model, log = train(replace(config, mode=mode), source, target)
        report = evaluate(model, test)
        metrics[mode] = {
            "target_auc": report.auc,
            "target_precision": report.precision,
            "target_mean_error_px": report.mean_error_px,
            "per_landmark": report.per_landmark,
            "steps": model.step,
        }
        ckpts[mode] = to_bytes(model)
    return ExperimentResult("adaptation", metrics, ckpts, time.perf_counter() - start)


def sweep(config: TrainConfig = DESK_CONFIG, setup: DomainSetup = DomainSetup(),
          counts: Sequence[int] = DEFAULT_COUNTS, out_dir=None) -> ExperimentResult:
    """Label-count sweep on the same task; the test split is held out of the labeled pool."""
    start = time.perf_counter()
    source, target, _, _ = setup.build()
    pool = generate_synthetic("target", setup.n_pool, setup.seed + 1000)
    with tempfile.TemporaryDirectory() as scratch:
        root = Path(out_dir) if out_dir is not None else Path(scratch)
        result = label_sweep(replace(config, seed=setup.seed), source, target, pool, counts,
                             setup.test_fraction, out_dir=root)
        ckpts = {f"count_{c}": (root / f"count_{c:04d}" / "final.ckpt").read_bytes() for c in counts}
    metrics = {
        "auc": {c: r.auc for c, r in result.entries},
        "precision": {c: r.precision for c, r in result.entries},
        "json": result.to_json(),
    }
    return ExperimentResult("sweep", metrics, ckpts, time.perf_counter() - start)

"""Interleaved reconstruction/regression training.

Each iteration takes one target batch and one source batch: a
reconstruction update of the encoder and decoder, then a landmark
regression update of the encoder and regressor. ``supervised_only`` runs
just the regression half (the ConvNet baseline).
"""
from __future__ import annotations

import configparser
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .checkpoint import save_checkpoint
from .data import Batch, DataError, Dataset, augment_batch, batches
from .netdef import ArchitectureSpec, ModelState, init_parameters

MODES = ("two_step", "supervised_only")
REC_NORMALIZATIONS = ("pixel", "image")
RECONSTRUCTION_GROUPS = ("enc", "dec")
REGRESSION_GROUPS = ("enc", "reg")


class TrainingError(RuntimeError):
    """Training cannot continue (divergence, isolation breach, disk failure)."""


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 128
    learning_rate: float = 3e-4
    momentum: float = 0.9
    seed: int = 0
    mode: str = "two_step"
    target_labeled_count: int = 0
    checkpoint_every: int = 0
    width_scale: float = 1.0
    input_size: int = 32
    input_channels: int = 1
    augment: bool = True
    rec_normalize: str = "pixel"
    source: str = ""
    target: str = ""
    target_labeled: str = ""
    test: str = ""
    out_dir: str = "runs/default"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.target_labeled_count < 0:
            raise ValueError("target_labeled_count must be >= 0")
        if self.rec_normalize not in REC_NORMALIZATIONS:
            raise ValueError(f"rec_normalize must be one of {REC_NORMALIZATIONS}, got {self.rec_normalize!r}")

    def architecture(self) -> ArchitectureSpec:
        return ArchitectureSpec(
            input_channels=self.input_channels, input_size=self.input_size, width_scale=self.width_scale
        )

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "TrainConfig":
        defaults = cls.__dataclass_fields__
        kwargs = {}
        for key, value in raw.items():
            key = key.strip()
            if key not in defaults:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(type(defaults[key].default), str(value).strip())
        return cls(**kwargs)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


def _coerce(kind, value: str):
    if kind is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return kind(value)


def load_config(path=None, overrides=()) -> TrainConfig:
    """Read flat ``key = value`` lines, then apply ``key=value`` overrides."""
    raw: dict[str, str] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        text = Path(path).read_text(encoding="utf-8")
        parser.read_string("[train]\n" + text)
        raw.update(parser["train"])
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value
    return TrainConfig.from_mapping(raw)


# ---------------------------------------------------------------------------
# optimisation


def sgd_update(param: np.ndarray, grad: np.ndarray, slot: np.ndarray, lr: float, momentum: float):
    """Heavy-ball step: slot <- momentum*slot + grad; param <- param - lr*slot."""
    if param.shape != grad.shape or slot.shape != grad.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, slot {slot.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient")
    new_slot = momentum * slot + grad
    return param - lr * new_slot, new_slot


def _apply_updates(model: ModelState, groups, lr: float, momentum: float, grad_scale: float = 1.0) -> None:
    for name, p in model.group(*groups).items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if grad_scale != 1.0:
            grad = grad * grad_scale
        p.data, model.slots[name] = sgd_update(p.data, grad, model.slots[name], lr, momentum)


def reconstruction_step(model: ModelState, images: np.ndarray, lr: float, momentum: float = 0.9,
                        normalize: str = "pixel") -> float:
    """One update of encoder+decoder on the squared reconstruction error.

    The returned loss is the per-image summed squared error averaged over the
    batch. With ``normalize="pixel"`` the update descends that loss divided by
    the pixel count C*H*W (the per-pixel mean), which keeps its gradients on the
    same scale as the regression step's; ``"image"`` uses the raw gradient.
    """
    if normalize not in REC_NORMALIZATIONS:
        raise ValueError(f"normalize must be one of {REC_NORMALIZATIONS}")
    scale = 1.0 / int(np.prod(images.shape[1:])) if normalize == "pixel" else 1.0
    model.zero_grad()
    try:
        loss = ad.mse_loss(model.reconstruct(Tensor(images)), images)
        ad.backward(loss)
        _apply_updates(model, RECONSTRUCTION_GROUPS, lr, momentum, scale)
    except NonFiniteError as exc:
        raise TrainingError(f"step {model.step}: non-finite reconstruction loss ({exc})") from exc
    finally:
        model.zero_grad()
    return loss.item()


def regression_step(model: ModelState, images: np.ndarray, landmarks: Optional[np.ndarray],
                    lr: float, momentum: float = 0.9) -> float:
    """One update of encoder+regressor on the batch-mean landmark MAE."""
    if landmarks is None or len(landmarks) != len(images):
        raise DataError("regression step needs a landmark row for every image")
    if np.any(np.abs(landmarks) > 1.0):
        raise DataError("regression targets must lie in [-1, 1]")
    model.zero_grad()
    try:
        loss = ad.mae_loss(model.regress(Tensor(images)), landmarks)
        ad.backward(loss)
        _apply_updates(model, REGRESSION_GROUPS, lr, momentum)
    except NonFiniteError as exc:
        raise TrainingError(f"step {model.step}: non-finite regression loss ({exc})") from exc
    finally:
        model.zero_grad()
    return loss.item()


def group_digest(model: ModelState, *groups: str) -> str:
    h = hashlib.sha256()
    for name, p in model.group(*groups).items():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    path: Optional[Path] = None

    def add(self, record: dict) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("step counter must increase")
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def losses(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records if r.get(key) is not None])

    def epoch_means(self) -> list[dict]:
        out: dict[int, dict] = {}
        for r in self.records:
            acc = out.setdefault(r["epoch"], {"epoch": r["epoch"], "steps": 0, "l_rec": [], "l_reg": []})
            acc["steps"] += 1
            for key in ("l_rec", "l_reg"):
                if r.get(key) is not None:
                    acc[key].append(r[key])
        return [
            {"epoch": e, "steps": a["steps"],
             "l_rec": float(np.mean(a["l_rec"])) if a["l_rec"] else None,
             "l_reg": float(np.mean(a["l_reg"])) if a["l_reg"] else None}
            for e, a in sorted(out.items())
        ]

    def deterministic_view(self) -> list[dict]:
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]


def _pick_labeled_subset(pool: Optional[Dataset], count: int, rng) -> Optional[Dataset]:
    if count == 0:
        return None
    if pool is None or not pool.labeled:
        raise DataError("target_labeled_count > 0 needs a labeled target pool")
    if count > len(pool):
        raise DataError(f"target_labeled_count {count} exceeds the labeled pool size {len(pool)}")
    return pool.subset(np.sort(rng.permutation(len(pool))[:count]))


def _mix_in_targets(batch: Batch, pool: Dataset, batch_size: int, rng, augment: bool, aug_rng) -> Batch:
    k = math.ceil(batch_size / 8)
    idx = rng.choice(len(pool), size=k, replace=k > len(pool))
    extra = Batch(pool.images[idx], pool.landmarks[idx], idx)
    if augment:
        extra = augment_batch(extra, aug_rng, target=True)
    return Batch(
        np.concatenate([batch.images, extra.images]),
        np.concatenate([batch.landmarks, extra.landmarks]),
        np.concatenate([batch.indices, -1 - idx]),
    )


def train(
    config: TrainConfig,
    source: Dataset,
    target: Optional[Dataset] = None,
    target_labeled: Optional[Dataset] = None,
    out_dir=None,
    log_path=None,
    model: Optional[ModelState] = None,
    check_isolation: bool = False,
) -> tuple[ModelState, TrainLog]:
    """Run the configured training and return the final model and its log."""
    if not source.labeled:
        raise DataError("the source dataset must be labeled")
    if config.mode == "two_step" and target is None:
        raise DataError("two_step mode needs a target dataset")

    seeds = np.random.SeedSequence(config.seed).spawn(6)
    src_rng, tgt_rng, pick_rng, mix_rng, aug_src, aug_tgt = (np.random.default_rng(s) for s in seeds)

    if model is None:
        model = init_parameters(config.architecture(), config.seed)
    labeled_pool = _pick_labeled_subset(target_labeled, config.target_labeled_count, pick_rng)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log = TrainLog(path=Path(log_path) if log_path is not None else None)
    if log.path is not None:
        log.path.parent.mkdir(parents=True, exist_ok=True)
        log.path.write_text("")

    two_step = config.mode == "two_step"
    bs = config.batch_size
    n_src = math.ceil(len(source) / bs)
    n_iter = max(n_src, math.ceil(len(target) / bs)) if two_step else n_src
    src_stream = batches(source, bs, src_rng, cycle=True)
    tgt_stream = batches(target, bs, tgt_rng, cycle=True) if two_step else None
    lr, mom = config.learning_rate, config.momentum

    for epoch in range(1, config.epochs + 1):
        for _ in range(n_iter):
            started = time.perf_counter()
            l_rec = None
            if two_step:
                tb = next(tgt_stream)
                if config.augment:
                    tb = augment_batch(tb, aug_tgt, target=True)
                before = group_digest(model, "reg") if check_isolation else None
                l_rec = reconstruction_step(model, tb.images, lr, mom, config.rec_normalize)
                if check_isolation and group_digest(model, "reg") != before:
                    raise TrainingError(f"step {model.step}: reconstruction step modified the regressor")
            sb = next(src_stream)
            if config.augment:
                sb = augment_batch(sb, aug_src, target=False)
            if labeled_pool is not None:
                sb = _mix_in_targets(sb, labeled_pool, bs, mix_rng, config.augment, aug_tgt)
            before = group_digest(model, "dec") if check_isolation else None
            l_reg = regression_step(model, sb.images, sb.landmarks, lr, mom)
            if check_isolation and group_digest(model, "dec") != before:
                raise TrainingError(f"step {model.step}: regression step modified the decoder")
            model.step += 1
            log.add({"step": model.step, "epoch": epoch, "l_rec": l_rec, "l_reg": l_reg,
                     "wall_time": time.perf_counter() - started})
        if out_dir is not None and config.checkpoint_every > 0 and epoch % config.checkpoint_every == 0:
            _checkpoint(model, out_dir / f"checkpoint_epoch{epoch:04d}.ckpt")
    if out_dir is not None:
        _checkpoint(model, out_dir / "final.ckpt")
    return model, log


def _checkpoint(model: ModelState, path: Path) -> None:
    try:
        save_checkpoint(model, path)
    except OSError as exc:
        raise TrainingError(f"could not write checkpoint {path}: {exc}") from exc

"""Central finite-difference checks for every differentiable op."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STEP = 1e-5
TOLERANCE = 1e-4
# Denominator floor for the elementwise relative error, so that entries whose
# true gradient is ~0 are judged on absolute error instead.
SCALE_FLOOR = 1e-3


@dataclass
class GradCheckResult:
    op: str
    errors: dict[str, float]
    tolerance: float = TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def line(self) -> str:
        parts = " ".join(f"{k}={v:.2e}" for k, v in self.errors.items())
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op:<13} max_rel_err={self.max_error:.2e} ({parts})"


def _away_from_zero(rng, shape, low=0.1, high=1.0):
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    # strictly distinct values with gaps far above the FD step
    n = int(np.prod(shape))
    return (rng.permutation(n) / n * 2.0 - 1.0).reshape(shape)


def _cases(rng) -> dict[str, tuple[Callable, dict[str, np.ndarray]]]:
    return {
        "conv2d": (
            lambda t: ad.conv2d(t["x"], t["k"], t["b"]),
            {"x": rng.normal(size=(2, 3, 5, 6)), "k": rng.normal(size=(4, 3, 3, 3)), "b": rng.normal(size=4)},
        ),
        "conv2d_narrow": (
            lambda t: ad.conv2d(t["x"], t["k"], t["b"]),
            {"x": rng.normal(size=(2, 4, 4, 5)), "k": rng.normal(size=(2, 4, 3, 3)), "b": rng.normal(size=2)},
        ),
        "maxpool2": (lambda t: ad.maxpool2(t["x"]), {"x": _distinct(rng, (2, 2, 4, 6))}),
        "upsample2": (lambda t: ad.upsample2(t["x"]), {"x": rng.normal(size=(2, 2, 3, 3))}),
        "dense": (
            lambda t: ad.dense(t["x"], t["w"], t["b"]),
            {"x": rng.normal(size=(4, 5)), "w": rng.normal(size=(5, 3)), "b": rng.normal(size=3)},
        ),
        "relu": (lambda t: ad.relu(t["x"]), {"x": _away_from_zero(rng, (3, 7))}),
        "tanh": (lambda t: ad.tanh(t["x"]), {"x": rng.normal(scale=1.5, size=(3, 7))}),
        "mse_loss": (
            lambda t: ad.mse_loss(t["p"], t["target"].data),
            {"p": rng.normal(size=(3, 8)), "target": rng.normal(size=(3, 8))},
        ),
        "mae": (
            lambda t: ad.mae(t["a"], t["b"].data),
            _mae_inputs(rng, (6,)),
        ),
        "mae_loss": (
            lambda t: ad.mae_loss(t["a"], t["b"].data),
            _mae_inputs(rng, (4, 6)),
        ),
    }


def _mae_inputs(rng, shape):
    b = rng.normal(size=shape)
    return {"a": b + _away_from_zero(rng, shape), "b": b}


OPS = ("conv2d", "conv2d_narrow", "maxpool2", "upsample2", "dense", "relu", "tanh", "mse_loss", "mae", "mae_loss")


def _projected_loss(fn, tensors, proj):
    out = fn(tensors)
    if out.data.size == 1:
        return ad.reshape(out, ())
    return ad.tensor_sum(ad.mul(out, Tensor(proj)))


def finite_diff_check(op: str, seed: int = 0, step: float = STEP) -> GradCheckResult:
    """Compare analytic gradients of ``op`` against central differences.

    Non-scalar outputs are reduced with a fixed random projection so that
    every output entry contributes to the checked scalar.
    """
    rng = np.random.default_rng(seed)
    fn, arrays = _cases(rng)[op]
    frozen = {"target", "b"} if op in ("mse_loss", "mae", "mae_loss") else set()
    tensors = {k: Tensor(v, requires_grad=k not in frozen) for k, v in arrays.items()}
    probe = fn(tensors)
    proj = rng.normal(size=probe.shape)
    for t in tensors.values():
        t.grad = None

    loss = _projected_loss(fn, tensors, proj)
    ad.backward(loss)

    def scalar():
        plain = {k: Tensor(v.data) for k, v in tensors.items()}
        out = fn(plain).data
        return float(out) if out.size == 1 else float(np.sum(out * proj))

    errors = {}
    for name, t in tensors.items():
        if not t.requires_grad:
            continue
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = scalar()
            flat[i] = orig - step
            f_minus = scalar()
            flat[i] = orig
            numeric.reshape(-1)[i] = (f_plus - f_minus) / (2 * step)
        analytic = t.grad
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), SCALE_FLOOR)
        errors[name] = float(np.max(np.abs(analytic - numeric) / denom))
    return GradCheckResult(op, errors)


def check_all(seed: int = 0) -> list[GradCheckResult]:
    return [finite_diff_check(op, seed) for op in OPS]

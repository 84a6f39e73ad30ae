"""Encoder, decoder and regressor networks plus the parameter container.

Layer widths default to the published architecture (conv 300/250/200/150/100,
fc 500) and can be shrunk with ``width_scale`` for desk-scale runs.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_CONV_WIDTHS = (300, 250, 200, 150, 100)


@dataclass(frozen=True)
class ArchitectureSpec:
    input_channels: int = 1
    input_size: int = 32
    conv_widths: tuple[int, ...] = DEFAULT_CONV_WIDTHS
    fc_width: int = 500
    landmark_count: int = 3
    width_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "conv_widths", tuple(int(w) for w in self.conv_widths))
        if len(self.conv_widths) != 5:
            raise ValueError(f"need exactly 5 conv widths, got {len(self.conv_widths)}")
        for name in ("input_channels", "input_size", "fc_width", "landmark_count"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if any(w < 1 for w in self.conv_widths):
            raise ValueError("conv widths must be positive")
        if not 0 < self.width_scale <= 1:
            raise ValueError(f"width_scale must lie in (0, 1], got {self.width_scale}")
        if self.input_size % 4:
            raise ValueError(f"input_size {self.input_size} is not divisible by 4")

    @property
    def widths(self) -> tuple[int, ...]:
        """Effective conv widths after scaling (ceiling rounding)."""
        return tuple(_scaled(w, self.width_scale) for w in self.conv_widths)

    @property
    def code_width(self) -> int:
        return _scaled(self.fc_width, self.width_scale)

    @property
    def output_dim(self) -> int:
        return 2 * self.landmark_count

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 4

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            else:
                value = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ArchitectureSpec":
        raw = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            value = raw[f.name].strip()
            if f.name == "conv_widths":
                kwargs[f.name] = tuple(int(v) for v in value.split(","))
            elif f.name == "width_scale":
                kwargs[f.name] = float(value)
            else:
                kwargs[f.name] = int(value)
        return cls(**kwargs)


def _scaled(width: int, scale: float) -> int:
    # round before ceil so that e.g. 0.1 * 300 == 30.000000000000004 stays 30
    return max(1, math.ceil(round(width * scale, 9)))


class Network:
    """A parameterized function; parameter names are prefixed by ``prefix``."""

    prefix = ""

    def __init__(self, spec: ArchitectureSpec):
        self.spec = spec

    def shapes(self) -> dict[str, tuple[int, ...]]:
        raise NotImplementedError

    def __call__(self, params: dict[str, Tensor], x: Tensor) -> Tensor:
        raise NotImplementedError


def _conv_shapes(name: str, c_in: int, c_out: int) -> dict[str, tuple[int, ...]]:
    return {f"{name}.weight": (c_out, c_in, 3, 3), f"{name}.bias": (c_out,)}


def _dense_shapes(name: str, d_in: int, d_out: int) -> dict[str, tuple[int, ...]]:
    return {f"{name}.weight": (d_in, d_out), f"{name}.bias": (d_out,)}


def _conv(params, name, x):
    return ad.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"])


def _dense(params, name, x):
    return ad.dense(x, params[f"{name}.weight"], params[f"{name}.bias"])


class Encoder(Network):
    """conv1-pool-conv2-pool-conv3-conv4-conv5-fc4, ReLU after every layer."""

    prefix = "enc"

    def shapes(self):
        s = self.spec
        w = s.widths
        out = {}
        c_in = s.input_channels
        for i, width in enumerate(w, start=1):
            out.update(_conv_shapes(f"enc.conv{i}", c_in, width))
            c_in = width
        out.update(_dense_shapes("enc.fc4", w[4] * s.bottleneck_size**2, s.code_width))
        return out

    def __call__(self, params, x):
        h = ad.relu(_conv(params, "enc.conv1", x))
        h = ad.maxpool2(h)
        h = ad.relu(_conv(params, "enc.conv2", h))
        h = ad.maxpool2(h)
        for i in (3, 4, 5):
            h = ad.relu(_conv(params, f"enc.conv{i}", h))
        return ad.relu(_dense(params, "enc.fc4", ad.flatten(h)))


class Decoder(Network):
    """Mirror of the encoder; pooling is undone by nearest x2 upsampling."""

    prefix = "dec"

    def shapes(self):
        s = self.spec
        w = s.widths
        out = _dense_shapes("dec.fc4", s.code_width, w[4] * s.bottleneck_size**2)
        out.update(_conv_shapes("dec.conv5", w[4], w[3]))
        out.update(_conv_shapes("dec.conv4", w[3], w[2]))
        out.update(_conv_shapes("dec.conv3", w[2], w[1]))
        out.update(_conv_shapes("dec.conv2", w[1], w[0]))
        out.update(_conv_shapes("dec.conv1", w[0], s.input_channels))
        return out

    def __call__(self, params, code):
        s = self.spec
        b = s.bottleneck_size
        h = ad.relu(_dense(params, "dec.fc4", code))
        h = ad.reshape(h, (code.shape[0], s.widths[4], b, b))
        h = ad.relu(_conv(params, "dec.conv5", h))
        h = ad.relu(_conv(params, "dec.conv4", h))
        h = ad.upsample2(h)
        h = ad.relu(_conv(params, "dec.conv3", h))
        h = ad.upsample2(h)
        h = ad.relu(_conv(params, "dec.conv2", h))
        return ad.relu(_conv(params, "dec.conv1", h))


class Regressor(Network):
    """Single fully connected layer with tanh output in (-1, 1)."""

    prefix = "reg"

    def shapes(self):
        return _dense_shapes("reg.fc", self.spec.code_width, self.spec.output_dim)

    def __call__(self, params, code):
        return ad.tanh(_dense(params, "reg.fc", code))


def build_encoder(spec: ArchitectureSpec) -> Encoder:
    return Encoder(spec)


def build_decoder(spec: ArchitectureSpec) -> Decoder:
    return Decoder(spec)


def build_regressor(spec: ArchitectureSpec) -> Regressor:
    return Regressor(spec)


def parameter_shapes(spec: ArchitectureSpec) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for net in (build_encoder(spec), build_decoder(spec), build_regressor(spec)):
        shapes.update(net.shapes())
    return shapes


def init_bound(shape: tuple[int, ...]) -> float:
    """Fan-in scaled uniform bound sqrt(6 / fan_in) for [D,K] or [F,C,kh,kw] weights."""
    fan_in = shape[0] if len(shape) == 2 else shape[1] * int(np.prod(shape[2:]))
    return math.sqrt(6.0 / fan_in)


@dataclass
class ModelState:
    spec: ArchitectureSpec
    params: dict[str, Tensor]
    slots: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0
    step: int = 0

    def __post_init__(self):
        self.encoder = build_encoder(self.spec)
        self.decoder = build_decoder(self.spec)
        self.regressor = build_regressor(self.spec)
        expected = parameter_shapes(self.spec)
        if list(expected) != list(self.params):
            raise ValueError("parameter names do not match the architecture")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape} != {shape}")
        for name in expected:
            self.slots.setdefault(name, np.zeros(expected[name], dtype=ad.DTYPE))

    def group(self, *prefixes: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.split(".", 1)[0] in prefixes}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def encode(self, x: Tensor) -> Tensor:
        return self.encoder(self.params, x)

    def reconstruct(self, x: Tensor) -> Tensor:
        return self.decoder(self.params, self.encode(x))

    def regress(self, x: Tensor) -> Tensor:
        return self.regressor(self.params, self.encode(x))

    def predict(self, images: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Normalized landmark predictions [N, 2*landmark_count] without tracking."""
        images = np.asarray(images, dtype=ad.DTYPE)
        frozen = {k: Tensor._wrap(v.data) for k, v in self.params.items()}
        out = []
        for start in range(0, len(images), chunk):
            x = Tensor._wrap(images[start:start + chunk])
            out.append(self.regressor(frozen, self.encoder(frozen, x)).data)
        if not out:
            return np.zeros((0, self.spec.output_dim))
        return np.concatenate(out, axis=0)

    def parameter_count(self, prefix: Optional[str] = None) -> int:
        return sum(v.data.size for k, v in self.params.items() if prefix is None or k.startswith(prefix))


# The decoder's output conv starts as the constant mid-grey image: zero weights,
# bias 0.5. A single ReLU output channel with random weights and zero bias is
# negative at every pixel for some seeds, and then no reconstruction gradient
# ever flows.
OUTPUT_LAYER = "dec.conv1"
OUTPUT_BIAS = 0.5


def init_parameters(spec: ArchitectureSpec, seed: int = 0) -> ModelState:
    """Fan-in scaled uniform weights and zero biases, drawn in a fixed name order.

    The decoder output layer is the exception (see ``OUTPUT_LAYER``).
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(spec).items():
        if name == f"{OUTPUT_LAYER}.weight":
            data = np.zeros(shape)
        elif name == f"{OUTPUT_LAYER}.bias":
            data = np.full(shape, OUTPUT_BIAS)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            bound = init_bound(shape)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return ModelState(spec=spec, params=params, seed=seed)

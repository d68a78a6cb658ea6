"""Toy four-stage convolutional segmentor with style-mixing taps.

Each stage is ``conv3x3 -> ReLU -> conv3x3 -> ReLU``; the stage stride is
applied by its first convolution. A 1x1 classifier on the stage-4 feature
produces logits, and ``p`` is their channel softmax. With the default
strides ``(2, 1, 2, 1)`` predictions live at a quarter of the input size.

When a :class:`StyleRef` is passed, the input image is style-mixed against
the target image before stage 1 and the stage-3 output is style-mixed
against the target stage-3 feature before stage 4. Mixing adds no
parameters.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .stylemix import StyleMixer

SCHEMA_VERSION = 1
MIX_POSITIONS = ("input", "layer3")


@dataclass(frozen=True)
class SegmentorConfig:
    widths: tuple = (8, 16, 16, 16)
    strides: tuple = (2, 1, 2, 1)
    num_classes: int = 5
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.widths) != 4 or len(self.strides) != 4:
            raise ConfigError("segmentor needs exactly four stage widths and strides")
        if min(self.widths) < 1 or min(self.strides) < 1:
            raise ConfigError(f"widths and strides must be positive: {self.widths}, {self.strides}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")

    @property
    def downsample(self):
        return int(np.prod(self.strides))

    def output_size(self, h, w):
        for s in self.strides:
            h = (h - 1) // s + 1
            w = (w - 1) // s + 1
        return h, w


@dataclass
class SegmentorParams:
    config: SegmentorConfig
    tensors: "OrderedDict[str, T.Tensor]" = field(default_factory=OrderedDict)

    def parameters(self):
        return list(self.tensors.values())

    def named_parameters(self):
        return list(self.tensors.items())

    def count(self):
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self):
        return SegmentorParams(
            self.config,
            OrderedDict((k, T.Tensor(v.data, requires_grad=True, name=k)) for k, v in self.tensors.items()),
        )

    def __getitem__(self, name):
        return self.tensors[name]


@dataclass
class FeatureBundle:
    p: T.Tensor
    f3: T.Tensor
    f4: T.Tensor


@dataclass
class StyleRef:
    image_style: T.Tensor
    feature_style: T.Tensor


def _param_layout(cfg):
    layout = []
    c_in = cfg.in_channels
    for stage, width in enumerate(cfg.widths, start=1):
        for conv, c in ((1, c_in), (2, width)):
            layout.append((f"layer{stage}.conv{conv}.weight", (width, c, 3, 3)))
            layout.append((f"layer{stage}.conv{conv}.bias", (width,)))
        c_in = width
    layout.append(("classifier.weight", (cfg.num_classes, c_in, 1, 1)))
    layout.append(("classifier.bias", (cfg.num_classes,)))
    return layout


def init_params(cfg, rng):
    """Seeded centered-uniform init.

    Stage kernels use the He bound ``sqrt(6/fan_in)``; biases and the
    classifier use ``1/sqrt(fan_in)``. The smaller bound on every kernel
    starves the early stages of gradient in this unnormalised stack.
    """
    tensors = OrderedDict()
    fan_in = None
    for name, shape in _param_layout(cfg):
        if name.endswith("weight"):
            fan_in = int(np.prod(shape[1:]))
        if name.endswith("weight") and name.startswith("layer"):
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = T.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)
    return SegmentorParams(cfg, tensors)


def _stage(params, x, stage, stride):
    pre = f"layer{stage}"
    x = T.conv2d(x, params[f"{pre}.conv1.weight"], params[f"{pre}.conv1.bias"], stride=stride, padding=1)
    x = T.relu(x)
    x = T.conv2d(x, params[f"{pre}.conv2.weight"], params[f"{pre}.conv2.bias"], stride=1, padding=1)
    return T.relu(x)


def forward(params, x, style=None, mode="train", mixer=None, positions=MIX_POSITIONS):
    """Run the segmentor and return ``FeatureBundle(p, f3, f4)``.

    ``mode="eval"`` disables gradient recording and forbids style injection.
    ``positions`` selects where mixing happens when ``style`` is given.
    """
    cfg = params.config
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"segmentor expects (N, {cfg.in_channels}, H, W) input, got {x.shape}")
    if style is not None and mode == "eval":
        raise ConfigError("style mixing is only available in train mode")
    unknown = set(positions) - set(MIX_POSITIONS)
    if unknown:
        raise ConfigError(f"unknown mixing positions {sorted(unknown)}")

    if mode == "eval":
        with T.no_grad():
            return _forward(params, x, None, None, ())
    if style is not None:
        if style.feature_style.shape[1] != cfg.widths[2]:
            raise ShapeError(
                f"feature style has {style.feature_style.shape[1]} channels, stage 3 has {cfg.widths[2]}"
            )
        if mixer is None and positions:
            raise ConfigError("style given without a StyleMixer")
    return _forward(params, x, style, mixer, tuple(positions) if style is not None else ())


def _forward(params, x, style, mixer, positions):
    s = params.config.strides
    if "input" in positions:
        x = mixer(x, style.image_style)
    h = _stage(params, x, 1, s[0])
    h = _stage(params, h, 2, s[1])
    f3 = _stage(params, h, 3, s[2])
    if "layer3" in positions:
        f3 = mixer(f3, style.feature_style)
    f4 = _stage(params, f3, 4, s[3])
    logits = T.conv2d(f4, params["classifier.weight"], params["classifier.bias"])
    return FeatureBundle(T.softmax(logits, axis=1), f3, f4)


def predict(params, x):
    """Arg-max class map at prediction resolution, shape ``(N, H4, W4)``."""
    return forward(params, x, mode="eval").p.data.argmax(axis=1)


def make_mixer(rng_lam, rng_noise, divisor=10.0, variant="mix"):
    return StyleMixer(rng_lam, rng_noise, divisor=divisor, variant=variant)


# ---- checkpoint format ----------------------------------------------------
# One line of compact JSON, a newline, then every parameter buffer as
# little-endian float64 in header order.

def save_checkpoint(path, params):
    cfg = params.config
    header = {
        "schema_version": SCHEMA_VERSION,
        "widths": list(cfg.widths),
        "strides": list(cfg.strides),
        "num_classes": cfg.num_classes,
        "in_channels": cfg.in_channels,
        "parameters": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for t in params.tensors.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint schema {header.get('schema_version')!r}")
    cfg = SegmentorConfig(
        widths=header["widths"],
        strides=header["strides"],
        num_classes=header["num_classes"],
        in_channels=header.get("in_channels", 3),
    )
    expected = _param_layout(cfg)
    listed = [(p["name"], tuple(p["shape"])) for p in header["parameters"]]
    if listed != expected:
        raise ValueError(f"{path}: parameter list does not match the declared architecture")
    body = np.frombuffer(raw, dtype="<f8", offset=nl + 1)
    total = sum(int(np.prod(shape)) for _, shape in listed)
    if body.size != total:
        raise ValueError(f"{path}: expected {total} float64 values, found {body.size}")
    tensors = OrderedDict()
    pos = 0
    for name, shape in listed:
        n = int(np.prod(shape))
        tensors[name] = T.Tensor(body[pos:pos + n].reshape(shape), requires_grad=True, name=name)
        pos += n
    return SegmentorParams(cfg, tensors)

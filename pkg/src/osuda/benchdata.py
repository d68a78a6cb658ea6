"""Procedural segmentation scenes with a controllable appearance shift.

A scene is a textured background (class 0) with rectangles, ellipses and
bars painted on top, one class per shape. Each class has its own base
colour and stripe texture. Domains differ only photometrically, through a
per-channel ``scale * x**gamma + shift`` map plus pixel noise, so source
and target splits rendered from the same geometry seed share label maps
exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import segmentor as seg
from .errors import ConfigError
from .loss import IGNORE_INDEX
from .rng import substream

SCHEMA_VERSION = 1

_BASE_PALETTE = np.array(
    [
        [0.45, 0.55, 0.40],
        [0.80, 0.35, 0.30],
        [0.30, 0.40, 0.80],
        [0.80, 0.75, 0.35],
        [0.55, 0.35, 0.65],
    ]
)


def class_palette(num_classes):
    """Base RGB colour and stripe parameters (angle, period) for each class."""
    if num_classes <= len(_BASE_PALETTE):
        colors = _BASE_PALETTE[:num_classes].copy()
    else:
        extra = np.random.default_rng(1234).uniform(0.2, 0.8, size=(num_classes - len(_BASE_PALETTE), 3))
        colors = np.vstack([_BASE_PALETTE, extra])
    angles = np.linspace(0.0, np.pi, num_classes, endpoint=False)
    periods = 3.0 + 2.0 * (np.arange(num_classes) % 3)
    return colors, angles, periods


@dataclass
class SceneSample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    label: np.ndarray  # (H, W) uint8, IGNORE_INDEX for ignored pixels
    sample_id: int = 0


@dataclass
class DomainSpec:
    scale: tuple = (1.0, 1.0, 1.0)
    shift: tuple = (0.0, 0.0, 0.0)
    gamma: float = 1.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.scale = tuple(float(v) for v in self.scale)
        self.shift = tuple(float(v) for v in self.shift)
        if len(self.scale) != 3 or len(self.shift) != 3:
            raise ConfigError("domain scale and shift need one value per colour channel")
        if self.gamma <= 0 or self.noise_std < 0:
            raise ConfigError(f"invalid domain gamma {self.gamma} / noise {self.noise_std}")


SOURCE_DOMAIN = DomainSpec(noise_std=0.02, seed=11)
TARGET_DOMAIN = DomainSpec(
    scale=(0.6, 0.85, 1.15), shift=(0.25, 0.05, -0.15), gamma=1.6, noise_std=0.03, seed=23
)


@dataclass
class Dataset:
    samples: list
    num_classes: int
    height: int
    width: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)


@dataclass
class MetricsReport:
    iou: np.ndarray  # (C,), NaN for classes absent from the ground truth
    miou: float
    pixel_counts: np.ndarray  # ground-truth pixels per class
    confusion: np.ndarray  # rows = ground truth, columns = prediction


# ---- scene generation -------------------------------------------------------

def _stripes(h, w, angle, period, phase):
    yy, xx = np.mgrid[0:h, 0:w]
    t = (xx * np.cos(angle) + yy * np.sin(angle)) / period
    return np.sin(2 * np.pi * t + phase)


def _shape_mask(rng, kind, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "rect":
        rh, rw = rng.integers(h // 6, h // 2 + 1), rng.integers(w // 6, w // 2 + 1)
        y0, x0 = rng.integers(0, h - rh + 1), rng.integers(0, w - rw + 1)
        return (yy >= y0) & (yy < y0 + rh) & (xx >= x0) & (xx < x0 + rw)
    if kind == "ellipse":
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(h / 10, h / 4), rng.uniform(w / 10, w / 4)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    # bar: long thin band across the image, horizontal or vertical
    thick = int(rng.integers(max(2, h // 12), max(3, h // 6) + 1))
    if rng.random() < 0.5:
        y0 = rng.integers(0, h - thick + 1)
        return (yy >= y0) & (yy < y0 + thick)
    x0 = rng.integers(0, w - thick + 1)
    return (xx >= x0) & (xx < x0 + thick)


def gen_scene(rng, num_classes, height, width, sample_id=0):
    """Render one clean scene and its exact label map."""
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    colors, angles, periods = class_palette(num_classes)
    label = np.zeros((height, width), dtype=np.uint8)
    n_shapes = int(rng.integers(2, 6))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, num_classes))
        kind = ("rect", "ellipse", "bar")[int(rng.integers(0, 3))]
        label[_shape_mask(rng, kind, height, width)] = cls

    image = np.empty((3, height, width))
    jitter = rng.uniform(-0.05, 0.05, size=(num_classes, 3))
    phases = rng.uniform(0, 2 * np.pi, size=num_classes)
    for cls in range(num_classes):
        mask = label == cls
        if not mask.any():
            continue
        tex = _stripes(height, width, angles[cls], periods[cls], phases[cls])
        for ch in range(3):
            layer = colors[cls, ch] + jitter[cls, ch] + 0.12 * tex
            image[ch][mask] = layer[mask]
    return SceneSample(np.clip(image, 0.0, 1.0), label, sample_id)


def apply_domain(image, spec, rng=None):
    """``clip(scale * image**gamma + shift + noise, 0, 1)`` per channel."""
    img = np.asarray(image, dtype=np.float64)
    scale = np.asarray(spec.scale).reshape(3, 1, 1)
    shift = np.asarray(spec.shift).reshape(3, 1, 1)
    out = scale * np.power(img, spec.gamma) + shift
    if spec.noise_std > 0:
        if rng is None:
            raise ValueError("a generator is required when noise_std > 0")
        out = out + rng.normal(0.0, spec.noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def render_split(seed, split, n, spec, num_classes=5, height=64, width=64):
    """``n`` scenes whose geometry depends only on ``(seed, split)``; ``spec`` sets the look."""
    samples = []
    for i in range(n):
        scene = gen_scene(substream(seed, "data", _split_key(split), i), num_classes, height, width, i)
        img = apply_domain(scene.image, spec, substream(seed, "domain", spec.seed, _split_key(split), i))
        samples.append(SceneSample(img, scene.label, i))
    return Dataset(samples, num_classes, height, width, {"split": split})


def _split_key(split):
    return {"source": 0, "eval": 1, "candidates": 2}.get(split, sum(map(ord, split)) + 100)


def build_benchmark(seed=0, num_classes=5, height=64, width=64, n_source=200, n_eval=40,
                    n_candidates=5, source_domain=SOURCE_DOMAIN, target_domain=TARGET_DOMAIN):
    """Source training set, held-out target evaluation set, and one-shot target candidates."""
    kw = dict(num_classes=num_classes, height=height, width=width)
    return {
        "source": render_split(seed, "source", n_source, source_domain, **kw),
        "eval": render_split(seed, "eval", n_eval, target_domain, **kw),
        "candidates": render_split(seed, "candidates", n_candidates, target_domain, **kw),
    }


# ---- metrics -----------------------------------------------------------------

def confusion_matrix(pred, gt, num_classes, ignore_index=IGNORE_INDEX):
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction and label sizes differ: {pred.shape} vs {gt.shape}")
    keep = gt != ignore_index
    idx = num_classes * gt[keep] + pred[keep]
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(cm):
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    gt_count = cm.sum(axis=1)
    union = gt_count + cm.sum(axis=0) - tp
    present = gt_count > 0
    iou = np.full(cm.shape[0], np.nan)
    iou[present] = tp[present] / union[present]
    miou = float(iou[present].mean()) if present.any() else float("nan")
    return iou, miou


def downsample_labels(label, factor):
    """Nearest-neighbour label downsampling onto the prediction grid."""
    off = factor // 2
    return np.ascontiguousarray(np.asarray(label)[..., off::factor, off::factor])


def _upsample_to(pred, h, w, factor):
    up = np.repeat(np.repeat(pred, factor, axis=0), factor, axis=1)
    return up[:h, :w]


def evaluate(params, dataset):
    """Confusion-matrix IoU of ``params`` on ``dataset`` at label resolution."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    c = params.config.num_classes
    factor = params.config.downsample
    cm = np.zeros((c, c), dtype=np.int64)
    for sample in dataset:
        x = seg.T.Tensor(sample.image[None])
        pred = seg.predict(params, x)[0]
        h, w = sample.label.shape
        cm += confusion_matrix(_upsample_to(pred, h, w, factor), sample.label, c)
    iou, miou = iou_from_confusion(cm)
    return MetricsReport(iou, miou, cm.sum(axis=1), cm)


# ---- on-disk format -------------------------------------------------------------
# index.json plus img_<id>.bin (little-endian float64, 3*H*W) and
# lbl_<id>.bin (uint8, H*W, 255 = ignore).

def save_dataset(path, dataset):
    os.makedirs(path, exist_ok=True)
    index = {
        "schema_version": SCHEMA_VERSION,
        "C": dataset.num_classes,
        "H": dataset.height,
        "W": dataset.width,
        "samples": [s.sample_id for s in dataset],
    }
    for s in dataset:
        with open(os.path.join(path, f"img_{s.sample_id}.bin"), "wb") as fh:
            fh.write(np.ascontiguousarray(s.image, dtype="<f8").tobytes())
        with open(os.path.join(path, f"lbl_{s.sample_id}.bin"), "wb") as fh:
            fh.write(np.ascontiguousarray(s.label, dtype=np.uint8).tobytes())
    with open(os.path.join(path, "index.json"), "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path):
    index_path = os.path.join(path, "index.json")
    if not os.path.isfile(index_path):
        raise FileNotFoundError(f"no dataset index at {index_path}")
    with open(index_path) as fh:
        index = json.load(fh)
    if index.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{index_path}: unsupported schema {index.get('schema_version')!r}")
    c, h, w = index["C"], index["H"], index["W"]
    samples = []
    for sid in index["samples"]:
        img = np.fromfile(os.path.join(path, f"img_{sid}.bin"), dtype="<f8")
        lbl = np.fromfile(os.path.join(path, f"lbl_{sid}.bin"), dtype=np.uint8)
        if img.size != 3 * h * w or lbl.size != h * w:
            raise ValueError(f"{path}: sample {sid} has the wrong size")
        samples.append(SceneSample(img.reshape(3, h, w).astype(np.float64), lbl.reshape(h, w), sid))
    return Dataset(samples, c, h, w, {"path": str(path)})

"""Source-only pretraining and one-shot adaptation.

Each adaptation iteration runs a gradient-free pass on the single target
image, builds patch prototypes from its stage-4 feature, runs a labelled
source image through the segmentor with target-style mixing, weights the
source pixels by prototype confidence damped by prediction entropy, and
takes one SGD step on ``alpha * CE + weighted CE``.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import benchdata
from . import ppm
from . import segmentor as seg
from . import tensor as T
from .errors import ConfigError, NumericalError, ShapeError
from .loss import cross_entropy, loss_terms
from .rng import substream
from .stylemix import StyleMixer

logger = logging.getLogger(__name__)

WEIGHTINGS = ("full", "no_conf", "no_entropy", "ones")
LOG_FIELDS = ("iter", "lr", "l_ce", "l_pce", "total", "neg_conf_pixels")


@dataclass
class AdaptConfig:
    base_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    alpha: float = 0.5
    patch_size: int = 4
    max_iters: int = 500
    poly_power: float = 0.9
    seed: int = 0
    mixing: tuple = ("input", "layer3")
    perturb_divisor: float = 10.0
    clamp_conf_nonneg: bool = False
    weighting: str = "full"
    style_variant: str = "mix"
    pretrain_iters: int = 6000
    pretrain_lr: float = 0.01
    source_subset: int | None = None

    def __post_init__(self):
        self.mixing = tuple(self.mixing)
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be at least 1, got {self.max_iters}")
        if self.pretrain_iters < 0:
            raise ConfigError(f"pretrain_iters must be non-negative, got {self.pretrain_iters}")
        bad = set(self.mixing) - set(seg.MIX_POSITIONS)
        if bad:
            raise ConfigError(f"unknown mixing positions {sorted(bad)}; allowed {seg.MIX_POSITIONS}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.style_variant not in ("mix", "adain"):
            raise ConfigError(f"style_variant must be 'mix' or 'adain', got {self.style_variant!r}")
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be positive, got {self.patch_size}")
        if self.perturb_divisor <= 0:
            raise ConfigError("perturb_divisor must be positive")
        if self.source_subset is not None and self.source_subset < 1:
            raise ConfigError("source_subset must be positive when given")

    def check_feature_size(self, h4, w4):
        ppm.check_patch_size(h4, w4, self.patch_size)


@dataclass
class TrainState:
    params: seg.SegmentorParams
    velocity: dict
    iteration: int = 0

    @classmethod
    def fresh(cls, params):
        return cls(params, {k: np.zeros(v.shape) for k, v in params.named_parameters()})


@dataclass
class AdaptResult:
    params: seg.SegmentorParams
    log: list = field(default_factory=list)
    target_images_seen: int = 0
    negative_conf_pixels: int = 0
    negative_gamma: int = 0
    optimizer_param_count: int = 0


def poly_lr(iteration, base_lr, max_iters, power=0.9):
    if not 0 <= iteration <= max_iters:
        raise ValueError(f"iteration {iteration} outside [0, {max_iters}]")
    return base_lr * (1.0 - iteration / max_iters) ** power


def sgd_step(state, lr, momentum=0.9, weight_decay=5e-4):
    """Momentum SGD with L2 weight decay folded into the gradient."""
    for name, p in state.params.named_parameters():
        if p.grad is None:
            raise ValueError(f"parameter {name} has no gradient")
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in {name}", state.iteration)
    for name, p in state.params.named_parameters():
        v = state.velocity[name]
        v *= momentum
        v += p.grad + weight_decay * p.data
        p.data -= lr * v
    state.iteration += 1
    return state


class SourceStream:
    """Endless labelled source samples, shuffled without replacement per epoch."""

    def __init__(self, dataset, rng, factor, subset=None):
        if len(dataset) == 0:
            raise ValueError("source dataset is empty")
        n = len(dataset) if subset is None else min(subset, len(dataset))
        self.items = [
            (T.Tensor(s.image[None]), benchdata.downsample_labels(s.label, factor))
            for s in dataset.samples[:n]
        ]
        self.rng = rng
        self._order = []
        self.epoch = 0

    def __iter__(self):
        return self

    def __next__(self):
        if not self._order:
            self._order = list(self.rng.permutation(len(self.items)))
            self.epoch += 1
        return self.items[self._order.pop(0)]


def _check_finite(value, what, iteration):
    if not math.isfinite(value):
        raise NumericalError(f"{what} became non-finite at iteration {iteration}", iteration)


def pretrain_source(cfg, source_dataset, seg_cfg=None, log=None):
    """Train from seeded random init with plain cross-entropy on source data."""
    if len(source_dataset) == 0:
        raise ValueError("source dataset is empty")
    seg_cfg = seg_cfg or seg.SegmentorConfig(num_classes=source_dataset.num_classes)
    params = seg.init_params(seg_cfg, substream(cfg.seed, "init"))
    if cfg.pretrain_iters == 0:
        return params
    state = TrainState.fresh(params)
    stream = SourceStream(source_dataset, substream(cfg.seed, "pretrain-shuffle"), seg_cfg.downsample,
                          cfg.source_subset)
    for it in range(cfg.pretrain_iters):
        lr = poly_lr(it, cfg.pretrain_lr, cfg.pretrain_iters, cfg.poly_power)
        x, y = next(stream)
        loss = cross_entropy(seg.forward(params, x).p, y)
        value = loss.item()
        _check_finite(value, "pretraining loss", it)
        loss.backward()
        sgd_step(state, lr, cfg.momentum, cfg.weight_decay)
        T.zero_grad(params.parameters())
        if log is not None:
            log.append({"iter": it, "lr": lr, "loss": value})
    return params


def _image_key(arr):
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def adapt_one_shot(pretrained, source_dataset, x_t, cfg):
    """Adapt a copy of ``pretrained`` to the single unlabelled target image ``x_t``."""
    params = pretrained.copy()
    seg_cfg = params.config
    x_t = np.asarray(getattr(x_t, "data", x_t), dtype=np.float64)
    if x_t.ndim == 4:
        if x_t.shape[0] != 1:
            raise ShapeError(f"exactly one target image is allowed, got batch of {x_t.shape[0]}")
        x_t = x_t[0]
    if x_t.ndim != 3 or x_t.shape[0] != seg_cfg.in_channels:
        raise ShapeError(f"target image must be ({seg_cfg.in_channels}, H, W), got {x_t.shape}")
    src_shape = source_dataset[0].image.shape
    if x_t.shape != src_shape:
        raise ShapeError(f"target image {x_t.shape} and source images {src_shape} differ in shape")
    cfg.check_feature_size(*seg_cfg.output_size(*x_t.shape[1:]))

    xt = T.Tensor(x_t[None])
    mixer = StyleMixer(substream(cfg.seed, "lambda"), substream(cfg.seed, "perturbation"),
                       cfg.perturb_divisor, cfg.style_variant)
    stream = SourceStream(source_dataset, substream(cfg.seed, "shuffle"), seg_cfg.downsample,
                          cfg.source_subset)
    state = TrainState.fresh(params)
    result = AdaptResult(params, optimizer_param_count=len(state.velocity))
    seen = set()

    for it in range(cfg.max_iters):
        lr = poly_lr(it, cfg.base_lr, cfg.max_iters, cfg.poly_power)
        with T.no_grad():
            target = seg.forward(params, xt, mode="eval")
            seen.add(_image_key(xt.data))
        protos = ppm.target_prototypes(target.f4, cfg.patch_size)

        xs, ys = next(stream)
        style = seg.StyleRef(xt, target.f3) if cfg.mixing else None
        source = seg.forward(params, xs, style=style, mode="train", mixer=mixer, positions=cfg.mixing)
        weights = ppm.source_weights(source.f4.data, source.p.data, protos, cfg.weighting,
                                     cfg.clamp_conf_nonneg)
        neg = int((weights.values < 0).sum())
        terms = loss_terms(source.p, ys, weights, cfg.alpha)
        total = terms.total.item()
        _check_finite(total, "adaptation loss", it)
        terms.total.backward()
        sgd_step(state, lr, cfg.momentum, cfg.weight_decay)
        T.zero_grad(params.parameters())

        result.negative_conf_pixels += neg
        result.log.append({
            "iter": it, "lr": lr, "l_ce": terms.l_ce.item(), "l_pce": terms.l_pce.item(),
            "total": total, "neg_conf_pixels": neg,
        })

    result.target_images_seen = len(seen)
    result.negative_gamma = mixer.negative_gamma
    if result.negative_conf_pixels:
        logger.info("negative confidence weights on %d source pixels", result.negative_conf_pixels)
    if result.negative_gamma:
        logger.info("negative mixed gamma in %d channel draws", result.negative_gamma)
    return result


def write_log_csv(path, rows, fields=LOG_FIELDS):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# ---- protocol & ablations ------------------------------------------------------

def run_protocol(pretrained, data, cfg, seeds, picks):
    """Adapt once per (one-shot pick, seed) and evaluate on the held-out target set."""
    rows = []
    for pick in picks:
        x_t = data["candidates"][pick].image
        for seed in seeds:
            res = adapt_one_shot(pretrained, data["source"], x_t, replace(cfg, seed=seed))
            report = benchdata.evaluate(res.params, data["eval"])
            rows.append({"pick": pick, "seed": seed, "report": report, "result": res})
    return rows


def loss_grid():
    return {
        "full": {},
        "no_conf": {"weighting": "no_conf"},
        "no_entropy": {"weighting": "no_entropy"},
    }


def mixing_grid():
    return {
        "none": {"mixing": ()},
        "input": {"mixing": ("input",)},
        "layer3": {"mixing": ("layer3",)},
        "both": {"mixing": ("input", "layer3")},
        "adain": {"mixing": ("input", "layer3"), "style_variant": "adain"},
    }


def patch_grid(sizes=(2, 4, 8, 16)):
    return {f"P{p}": {"patch_size": p} for p in sizes}


def _run_cell(args):
    pretrained, data, cfg, name, seed, pick = args
    res = adapt_one_shot(pretrained, data["source"], data["candidates"][pick].image, cfg)
    report = benchdata.evaluate(res.params, data["eval"])
    return {"cell": name, "seed": seed, "pick": pick, "miou": report.miou}


def ablation_suite(pretrained, data, base_cfg, grid, seeds, picks=(0,), workers=1):
    """One adaptation run per (cell, seed, pick); returns per-run rows and per-cell summaries."""
    jobs = []
    for name, overrides in grid.items():
        for seed in seeds:
            for pick in picks:
                cfg = replace(base_cfg, seed=seed, **overrides)
                jobs.append((pretrained, data, cfg, name, seed, pick))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            runs = list(ex.map(_run_cell, jobs))
    else:
        runs = [_run_cell(j) for j in jobs]
    summary = []
    for name in grid:
        vals = np.array([r["miou"] for r in runs if r["cell"] == name])
        summary.append({"cell": name, "runs": len(vals), "mean_miou": float(vals.mean()),
                        "std_miou": float(vals.std())})
    return runs, summary


def config_dict(cfg):
    d = asdict(cfg)
    d["mixing"] = list(cfg.mixing)
    return d

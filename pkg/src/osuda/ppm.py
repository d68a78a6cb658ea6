"""Patchwise prototypical matching.

The target stage-4 feature is tiled into non-overlapping ``P x P`` patches,
each patch is averaged into a prototype, and every source pixel is scored
by its best cosine similarity to any prototype. The fused score is then
damped by the normalised entropy of the source prediction.

Everything here works on detached arrays: the maps feed the loss as
constant weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

NORM_FLOOR = 1e-12
KINDS = ("per-prototype", "fused", "entropy", "rectified")


@dataclass
class PrototypeSet:
    protos: np.ndarray  # (N, C4)
    patch_size: int
    grid: tuple

    def __len__(self):
        return self.protos.shape[0]


@dataclass
class ConfidenceMap:
    values: np.ndarray  # (H4, W4)
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown confidence-map kind {self.kind!r}")


def _feature(x):
    a = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ShapeError(f"expected a single feature map, got batch shape {a.shape}")
        a = a[0]
    if a.ndim != 3:
        raise ShapeError(f"expected (C, H, W) feature, got shape {a.shape}")
    return a


def check_patch_size(h4, w4, patch_size):
    if patch_size < 1 or h4 % patch_size or w4 % patch_size:
        raise ConfigError(
            f"patch size {patch_size} must divide the stage-4 feature size {h4}x{w4}"
        )


def patchify(f4_t, patch_size):
    """Row-major non-overlapping tiling, ``(C, H, W) -> (N, C, P*P)``."""
    f = _feature(f4_t)
    c, h, w = f.shape
    P = int(patch_size)
    check_patch_size(h, w, P)
    gh, gw = h // P, w // P
    tiles = f.reshape(c, gh, P, gw, P).transpose(1, 3, 0, 2, 4)
    return tiles.reshape(gh * gw, c, P * P)


def unpatchify(patches, grid, patch_size):
    gh, gw = grid
    n, c, _ = patches.shape
    P = patch_size
    tiles = patches.reshape(gh, gw, c, P, P).transpose(2, 0, 3, 1, 4)
    return tiles.reshape(c, gh * P, gw * P)


def prototypes(patches, patch_size=None, grid=None):
    """Mean feature vector of each patch."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3 or patches.shape[0] == 0 or patches.shape[2] == 0:
        raise ShapeError(f"prototypes: need non-empty (N, C, P*P) patches, got {patches.shape}")
    if patch_size is None:
        patch_size = int(round(np.sqrt(patches.shape[2])))
    if grid is None:
        grid = (patches.shape[0], 1)
    return PrototypeSet(patches.mean(axis=2), int(patch_size), tuple(grid))


def target_prototypes(f4_t, patch_size):
    f = _feature(f4_t)
    P = int(patch_size)
    patches = patchify(f, P)
    return prototypes(patches, P, (f.shape[1] // P, f.shape[2] // P))


def _unit_rows(m):
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    return m / np.maximum(norms, NORM_FLOOR)


def per_prototype_confidence(f4_s, protos):
    """Cosine similarity of every source pixel to every prototype, ``(N, H4, W4)``."""
    f = _feature(f4_s)
    c, h, w = f.shape
    if protos.protos.shape[1] != c:
        raise ShapeError(
            f"source feature has {c} channels, prototypes have {protos.protos.shape[1]}"
        )
    pix = _unit_rows(f.reshape(c, h * w).T)
    pro = _unit_rows(protos.protos)
    return (pro @ pix.T).reshape(len(protos), h, w)


def confidence(f4_s, protos):
    """Max-fused cosine confidence over all prototypes."""
    sims = per_prototype_confidence(f4_s, protos)
    return ConfidenceMap(sims.max(axis=0), "fused")


def entropy_map(p_s):
    """Entropy of the class distribution at each pixel, normalised by ``log C``."""
    p = _feature(p_s)
    c = p.shape[0]
    if c < 2:
        raise ConfigError("entropy normalisation needs at least 2 classes")
    # 1 - KL(p || uniform) / log C: same value as -sum(p log p) / log C, but
    # a uniform p gives log(p*C) == 0 and a one-hot p gives KL == log C, so
    # both extremes come out exact.
    safe = np.where(p > 0, p, 1.0)
    kl = np.where(p > 0, p * np.log(safe * c), 0.0).sum(axis=0)
    e = 1.0 - kl / np.log(c)
    return ConfidenceMap(np.clip(e, 0.0, 1.0), "entropy")


def rectify(fused, entropy, clamp_nonneg=False):
    """``fused * (1 - entropy)``; optionally clamp the result to ``[0, 1]``."""
    if fused.values.shape != entropy.values.shape:
        raise ShapeError(
            f"rectify: fused map {fused.values.shape} vs entropy map {entropy.values.shape}"
        )
    out = fused.values * (1.0 - entropy.values)
    if clamp_nonneg:
        out = np.clip(out, 0.0, 1.0)
    return ConfidenceMap(out, "rectified")


def source_weights(f4_s, p_s, protos, mode="full", clamp_nonneg=False):
    """Per-pixel loss weights for the weighted cross-entropy.

    ``mode`` selects the variant: ``full`` uses ``Conf * (1 - E)``,
    ``no_conf`` uses ``1 - E``, ``no_entropy`` uses ``Conf`` and ``ones``
    gives uniform weights.
    """
    if mode == "ones":
        f = _feature(f4_s)
        return ConfidenceMap(np.ones(f.shape[1:]), "rectified")
    ent = entropy_map(p_s)
    if mode == "no_conf":
        return ConfidenceMap(1.0 - ent.values, "rectified")
    fused = confidence(f4_s, protos)
    if mode == "no_entropy":
        vals = np.clip(fused.values, 0.0, 1.0) if clamp_nonneg else fused.values
        return ConfidenceMap(vals, "rectified")
    if mode != "full":
        raise ConfigError(f"unknown weighting mode {mode!r}")
    return rectify(fused, ent, clamp_nonneg)

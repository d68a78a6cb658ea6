"""Pixel-wise cross-entropy objectives on class-probability maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError

IGNORE_INDEX = 255
PROB_FLOOR = 1e-12
DEFAULT_ALPHA = 0.5


@dataclass
class LossTerms:
    l_ce: T.Tensor
    l_pce: T.Tensor
    total: T.Tensor
    alpha: float


def _labels(p, y):
    y = np.asarray(y)
    if y.ndim == 3:
        if y.shape[0] != 1:
            raise ShapeError(f"labels must describe one image, got shape {y.shape}")
        y = y[0]
    if p.ndim != 4 or p.shape[0] != 1 or y.shape != p.shape[2:]:
        raise ShapeError(f"prediction {p.shape} and labels {y.shape} are incompatible")
    return y


def _target_mask(p, y, ignore_index):
    """One-hot label mask ``(1, C, H, W)`` with ignored pixels zeroed, plus the valid count."""
    y = _labels(p, y)
    c = p.shape[1]
    valid = y != ignore_index
    if np.any(y[valid] < 0) or np.any(y[valid] >= c):
        raise ValueError(f"labels must lie in [0, {c}) or equal {ignore_index}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("every pixel is ignored; the mean loss is undefined")
    onehot = np.zeros(p.shape)
    hh, ww = np.nonzero(valid)
    onehot[0, y[hh, ww].astype(np.intp), hh, ww] = 1.0
    return onehot, n_valid


def _weighted_nll(p, onehot, n_valid):
    logp = T.log(T.clip_min(p, PROB_FLOOR))
    return -T.tsum(logp * T.Tensor(onehot)) / float(n_valid)


def cross_entropy(p, y, ignore_index=IGNORE_INDEX):
    """Mean negative log-probability of the true class over non-ignored pixels."""
    onehot, n_valid = _target_mask(p, y, ignore_index)
    return _weighted_nll(p, onehot, n_valid)


def weighted_cross_entropy(p, y, conf_hat, ignore_index=IGNORE_INDEX):
    """Cross-entropy with a constant per-pixel weight map.

    The mean is still taken over all valid pixels, not over the weight mass.
    """
    weights = np.asarray(getattr(conf_hat, "values", conf_hat), dtype=np.float64)
    if weights.shape != p.shape[2:]:
        raise ShapeError(f"weight map {weights.shape} does not match prediction {p.shape}")
    onehot, n_valid = _target_mask(p, y, ignore_index)
    return _weighted_nll(p, onehot * weights, n_valid)


def total_loss(l_ce, l_pce, alpha=DEFAULT_ALPHA):
    return alpha * l_ce + l_pce


def loss_terms(p, y, conf_hat, alpha=DEFAULT_ALPHA, ignore_index=IGNORE_INDEX):
    l_ce = cross_entropy(p, y, ignore_index)
    l_pce = weighted_cross_entropy(p, y, conf_hat, ignore_index)
    return LossTerms(l_ce, l_pce, total_loss(l_ce, l_pce, alpha), alpha)

"""Parameter-free style mixing of per-channel feature statistics.

A source feature is re-normalised with a per-channel scale ``gamma`` and
shift ``beta`` that blend its own statistics with those of a target feature
whose statistics have been jittered by a small Gaussian perturbation::

    gamma = lam * sigma_s + (1 - lam) * (sigma_t + r_sigma)
    beta  = lam * mu_s    + (1 - lam) * (mu_t + r_mu)
    f_hat = gamma * (f_s - mu_s) / sigma_s + beta

``lam`` is drawn from U(0, 1) per channel and the perturbation std is
``|stat_t - stat_s| / divisor``. Draws are constants with respect to
gradients; the source statistics are not.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

EPS = 1e-30
VARIANTS = ("mix", "adain")


@dataclass
class ChannelStats:
    """Per-channel spatial mean and std, each of shape ``(N, C, 1, 1)``."""

    mu: T.Tensor
    sigma: T.Tensor

    @property
    def channels(self):
        return self.mu.shape[1]


@dataclass
class MixParams:
    lam: np.ndarray
    r_mu: np.ndarray
    r_sigma: np.ndarray
    gamma: T.Tensor
    beta: T.Tensor


def channel_stats(f, eps=EPS):
    if f.ndim != 4:
        raise ShapeError(f"channel_stats: expected NCHW feature, got shape {f.shape}")
    if f.shape[2] * f.shape[3] < 1:
        raise ShapeError(f"channel_stats: empty spatial extent in shape {f.shape}")
    return ChannelStats(T.channel_mean(f), T.channel_std(f, eps))


def _check_pair(stats_s, stats_t):
    if stats_s.mu.shape != stats_t.mu.shape:
        raise ShapeError(
            f"style statistics disagree: source {stats_s.mu.shape} vs target {stats_t.mu.shape}"
        )


def draw_mix_noise(stats_s, stats_t, lam_rng, noise_rng=None, divisor=10.0):
    """Draw ``(lam, r_mu, r_sigma)`` for one source/target pair."""
    _check_pair(stats_s, stats_t)
    noise_rng = lam_rng if noise_rng is None else noise_rng
    shape = stats_s.mu.shape
    lam = lam_rng.uniform(0.0, 1.0, size=shape)
    sd_sigma = np.abs(stats_t.sigma.data - stats_s.sigma.data) / divisor
    sd_mu = np.abs(stats_t.mu.data - stats_s.mu.data) / divisor
    r_sigma = noise_rng.normal(0.0, 1.0, size=shape) * sd_sigma
    r_mu = noise_rng.normal(0.0, 1.0, size=shape) * sd_mu
    return lam, r_mu, r_sigma


def mix_stats(stats_s, stats_t, lam, r_mu, r_sigma):
    """Blend source and perturbed target statistics into ``(gamma, beta)``."""
    _check_pair(stats_s, stats_t)
    lam = T.Tensor(lam)
    keep = 1.0 - lam
    gamma = lam * stats_s.sigma + keep * (stats_t.sigma + T.Tensor(r_sigma))
    beta = lam * stats_s.mu + keep * (stats_t.mu + T.Tensor(r_mu))
    return gamma, beta


def sample_mix_params(stats_s, stats_t, rng, divisor=10.0, noise_rng=None, lam=None):
    """Fresh mixing parameters; pass ``lam`` to pin the weights (test hook)."""
    drawn_lam, r_mu, r_sigma = draw_mix_noise(stats_s, stats_t, rng, noise_rng, divisor)
    if lam is not None:
        drawn_lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), drawn_lam.shape).copy()
    gamma, beta = mix_stats(stats_s, stats_t, drawn_lam, r_mu, r_sigma)
    return MixParams(drawn_lam, r_mu, r_sigma, gamma, beta)


def stylize(f_s, gamma, beta, stats=None):
    """Normalise ``f_s`` per channel, then rescale by ``gamma`` and shift by ``beta``."""
    if gamma.shape != beta.shape or f_s.ndim != 4 or gamma.shape != f_s.shape[:2] + (1, 1):
        raise ShapeError(
            f"stylize: feature {f_s.shape} incompatible with gamma {gamma.shape} / beta {beta.shape}"
        )
    if stats is None:
        stats = channel_stats(f_s)
    return (f_s - stats.mu) / stats.sigma * gamma + beta


class StyleMixer:
    """Stateful sampler used inside the segmentor.

    Holds the lambda and perturbation generators and a couple of diagnostic
    counters. It owns no trainable tensors.
    """

    def __init__(self, lam_rng, noise_rng, divisor=10.0, variant="mix", lam_override=None):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown style-mixing variant {variant!r}; expected one of {VARIANTS}")
        if divisor <= 0:
            raise ConfigError(f"perturbation divisor must be positive, got {divisor}")
        self.lam_rng = lam_rng
        self.noise_rng = noise_rng
        self.divisor = float(divisor)
        self.variant = variant
        self.lam_override = lam_override
        self.calls = 0
        self.negative_gamma = 0
        self.history = None

    def parameters(self):
        return []

    def draw(self, stats_s, stats_t):
        if self.variant == "adain":
            zeros = np.zeros(stats_s.mu.shape)
            return zeros, zeros.copy(), zeros.copy()
        lam, r_mu, r_sigma = draw_mix_noise(
            stats_s, stats_t, self.lam_rng, self.noise_rng, self.divisor
        )
        if self.lam_override is not None:
            lam = np.full(lam.shape, float(self.lam_override))
        return lam, r_mu, r_sigma

    def __call__(self, f_s, f_t):
        """Stylise ``f_s`` against the statistics of ``f_t``."""
        stats_s = channel_stats(f_s)
        stats_t = channel_stats(f_t)
        lam, r_mu, r_sigma = self.draw(stats_s, stats_t)
        if self.history is not None:
            self.history.append((lam, r_mu, r_sigma))
        gamma, beta = mix_stats(stats_s, stats_t, lam, r_mu, r_sigma)
        self.calls += 1
        self.negative_gamma += int((gamma.data < 0).sum())
        return stylize(f_s, gamma, beta, stats_s)


class ReplayMixer(StyleMixer):
    """Replays recorded draws in order; used to hold samples fixed in gradient checks."""

    def __init__(self, draws):
        super().__init__(None, None)
        self._draws = list(draws)
        self._pos = 0

    def draw(self, stats_s, stats_t):
        lam, r_mu, r_sigma = self._draws[self._pos % len(self._draws)]
        self._pos += 1
        return lam, r_mu, r_sigma

"""Gaussian-mechanism DP at item, user and subject granularity.

The noise multiplier ``sigma`` is the configuration primitive: noise standard
deviation is ``sigma * C`` for clip threshold ``C``.  Epsilon is only ever
reported, from a Renyi-DP bound for the subsampled Gaussian mechanism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import nnet

GRANULARITIES = ("item", "user", "subject")

RDP_ORDERS = (1.5, 1.75, 2.0, 2.25, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 6.0, 7.0, 8.0,
              10.0, 12.0, 14.0, 16.0, 20.0, 24.0, 28.0, 32.0, 48.0, 64.0)


class NoiseRequired(ValueError):
    pass


@dataclass(frozen=True)
class DpConfig:
    granularity: str = "subject"
    clip_threshold: float = math.inf
    noise_multiplier: float = 0.0
    delta: float = 1e-5
    report_epsilon: bool = False

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown DP granularity {self.granularity!r}")
        if not self.clip_threshold > 0:
            raise ValueError("clip threshold must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise multiplier must be non-negative")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")

    @property
    def disabled(self) -> bool:
        """``sigma == 0`` with ``C == inf``: the sentinel for plain training."""
        return self.noise_multiplier == 0 and math.isinf(self.clip_threshold)

    @property
    def noise_std(self) -> float:
        return self.noise_multiplier * self.clip_threshold if self.noise_multiplier else 0.0

    def to_dict(self) -> dict:
        return {
            "granularity": self.granularity,
            "clip_threshold": self.clip_threshold,
            "noise_multiplier": self.noise_multiplier,
            "delta": self.delta,
            "report_epsilon": self.report_epsilon,
        }


def clip(v, C: float) -> np.ndarray:
    """Scale `v` onto the L2 ball of radius `C` if it lies outside."""
    if not C > 0:
        raise ValueError("clip threshold must be positive")
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm <= C:
        return v.copy()
    return v * (C / norm)


def gaussian_noise(size: int, dp: DpConfig, rng: np.random.Generator) -> np.ndarray:
    std = dp.noise_std
    if std == 0:
        return np.zeros(size)
    return std * rng.standard_normal(size)


def _clip_scales(norms: np.ndarray, C: float) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(norms > C, C / np.where(norms > 0, norms, 1.0), 1.0)


def clipped_group_sum(params: nnet.ModelParams, x, y, group_index, C: float):
    """``sum_g clip(mean_{i in g} grad_i, C)`` and the number of groups.

    `group_index` maps each example to a group in ``0..G-1``.
    """
    group_index = np.asarray(group_index)
    n_groups = int(group_index.max()) + 1
    counts = np.bincount(group_index, minlength=n_groups).astype(np.float64)
    terms = nnet.backprop_terms(params, x, y)
    if math.isinf(C):
        scales = np.ones(n_groups)
    else:
        norms = nnet.group_gradient_norms(terms, group_index, n_groups) / counts
        scales = _clip_scales(norms, C)
    weights = (scales / counts)[group_index]
    return nnet.gradient_from_terms(terms, weights), n_groups


def item_dp_batch_gradient(params: nnet.ModelParams, batch, dp: DpConfig,
                           rng: np.random.Generator) -> np.ndarray:
    """DP-SGD gradient: per-example clipping, Gaussian noise, mean over the batch."""
    n = len(batch)
    total, _ = clipped_group_sum(params, batch.x, batch.y, np.arange(n), dp.clip_threshold)
    return (total + gaussian_noise(total.size, dp, rng)) / n


def subject_groups(subject_ids) -> np.ndarray:
    """Group index per example, groups ordered by subject id."""
    _, inverse = np.unique(np.asarray(subject_ids), return_inverse=True)
    return inverse.ravel()


def subject_dp_batch_gradient(params: nnet.ModelParams, batch, dp: DpConfig,
                              rng: np.random.Generator) -> np.ndarray:
    """Hierarchical gradient averaging.

    Per-example gradients are averaged within each subject, each subject's
    average is clipped to ``C``, the clipped averages are summed and noised,
    and the result is divided by the number of distinct subjects in the batch.
    """
    groups = subject_groups(batch.subject_ids)
    total, n_groups = clipped_group_sum(params, batch.x, batch.y, groups, dp.clip_threshold)
    return (total + gaussian_noise(total.size, dp, rng)) / n_groups


def user_dp_update(delta, dp: DpConfig, rng: np.random.Generator) -> np.ndarray:
    """Clip a client's model delta and add Gaussian noise before it leaves the client."""
    delta = np.asarray(delta, dtype=np.float64)
    out = delta.copy() if math.isinf(dp.clip_threshold) else clip(delta, dp.clip_threshold)
    return out + gaussian_noise(out.size, dp, rng)


def dp_batch_gradient(params, batch, dp: DpConfig, rng) -> np.ndarray:
    if dp.granularity == "item":
        return item_dp_batch_gradient(params, batch, dp, rng)
    if dp.granularity == "subject":
        return subject_dp_batch_gradient(params, batch, dp, rng)
    raise ValueError("user-level DP acts on model updates, not batch gradients")


# -- accounting ------------------------------------------------------------

def _log_add(a: float, b: float) -> float:
    lo, hi = min(a, b), max(a, b)
    if lo == -math.inf:
        return hi
    return math.log1p(math.exp(lo - hi)) + hi


def _log_comb(n: float, k: float) -> float:
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def _log_erfc(x: float) -> float:
    return math.log(2) + special.log_ndtr(-x * math.sqrt(2))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    log_a = -math.inf
    for i in range(alpha + 1):
        term = (_log_comb(alpha, i) + i * math.log(q) + (alpha - i) * math.log1p(-q)
                + (i * i - i) / (2 * sigma**2))
        log_a = _log_add(log_a, term)
    return log_a


def _log_sub(a: float, b: float) -> float:
    """log(exp(a) - exp(b)) for a >= b."""
    if b == -math.inf:
        return a
    if a <= b:
        return -math.inf
    return a + math.log1p(-math.exp(b - a))


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    # binomial coefficients of a fractional order change sign once i > alpha + 1
    log_a0 = log_a1 = -math.inf
    z0 = sigma**2 * math.log(1 / q - 1) + 0.5
    for i in range(10_000):
        coef = special.binom(alpha, i)
        log_coef = math.log(abs(coef))
        j = alpha - i
        t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2) * sigma))
        e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2) * sigma))
        s0 = t0 + (i * i - i) / (2 * sigma**2) + e0
        s1 = t1 + (j * j - j) / (2 * sigma**2) + e1
        if coef > 0:
            log_a0 = _log_add(log_a0, s0)
            log_a1 = _log_add(log_a1, s1)
        else:
            log_a0 = _log_sub(log_a0, s0)
            log_a1 = _log_sub(log_a1, s1)
        if max(s0, s1) < -30:
            return _log_add(log_a0, log_a1)
    return math.inf


def subsampled_gaussian_rdp(q: float, sigma: float, order: float) -> float:
    """Renyi divergence bound of one Poisson-subsampled Gaussian step."""
    if q == 1.0:
        return order / (2 * sigma**2)
    if float(order).is_integer():
        log_a = _log_a_int(q, sigma, int(order))
    else:
        log_a = _log_a_frac(q, sigma, order)
    return log_a / (order - 1)


def report_epsilon(dp: DpConfig, sampling_rate: float, steps: int,
                   orders=RDP_ORDERS) -> float:
    """Upper bound on epsilon at ``dp.delta`` after `steps` subsampled Gaussian steps.

    Uses the standard conversion ``eps = min_a rdp(a) + log(1/delta) / (a - 1)``.
    """
    if dp.noise_multiplier == 0:
        raise NoiseRequired("epsilon is unbounded without noise")
    if not 0 < sampling_rate <= 1:
        raise ValueError("sampling rate must lie in (0, 1]")
    if steps < 1:
        raise ValueError("steps must be positive")
    eps = [
        steps * subsampled_gaussian_rdp(sampling_rate, dp.noise_multiplier, a)
        + math.log(1 / dp.delta) / (a - 1)
        for a in orders
    ]
    return float(min(eps))

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, optimize, stats

from subjectmia import dpcore
from subjectmia.dpcore import (
    DpConfig,
    NoiseRequired,
    clip,
    clipped_group_sum,
    item_dp_batch_gradient,
    report_epsilon,
    subject_dp_batch_gradient,
    subsampled_gaussian_rdp,
    user_dp_update,
)
from subjectmia.nnet import MlpSpec, init_params, per_example_gradients
from subjectmia.synthgen import PointSet


def make_batch(n=12, d=4, n_subjects=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    y = rng.integers(0, 2, n)
    sids = rng.integers(0, n_subjects, n)
    return PointSet(x, y, sids, np.arange(n))


def model(d=4, seed=1):
    return init_params(MlpSpec(d, (5, 3)), np.random.default_rng(seed))


def manual_subject_dp(params, batch, C):
    per = per_example_gradients(params, batch.x, batch.y)
    total = np.zeros(per.shape[1])
    sids = np.unique(batch.subject_ids)
    for s in sids:
        total += clip(per[batch.subject_ids == s].mean(axis=0), C)
    return total / len(sids)


# -- clipping ---------------------------------------------------------------

def test_clip_examples():
    assert np.allclose(clip([3.0, 4.0], 1.0), [0.6, 0.8])
    assert np.array_equal(clip([0.3, 0.4], 1.0), [0.3, 0.4])
    assert np.array_equal(clip([0.0, 0.0], 1.0), [0.0, 0.0])
    with pytest.raises(ValueError):
        clip([1.0], 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.floats(1e-3, 1e3))
def test_clip_bound_and_direction(v, C):
    v = np.array(v)
    out = clip(v, C)
    assert np.linalg.norm(out) <= C * (1 + 1e-12)
    if np.linalg.norm(v) <= C:
        assert np.array_equal(out, v)
    else:
        # same direction: positive multiple
        ratio = out @ v / (np.linalg.norm(out) * np.linalg.norm(v))
        assert ratio == pytest.approx(1.0, abs=1e-9)


# -- item level -------------------------------------------------------------

def test_item_dp_without_clip_or_noise_is_mean_gradient():
    p, b = model(), make_batch()
    dp = DpConfig("item", math.inf, 0.0)
    g = item_dp_batch_gradient(p, b, dp, np.random.default_rng(0))
    assert np.allclose(g, per_example_gradients(p, b.x, b.y).mean(axis=0), rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize("C", [1e-3, 0.05, 0.3, 10.0])
def test_item_dp_matches_materialised_clipping(C):
    p, b = model(), make_batch(n=15)
    per = per_example_gradients(p, b.x, b.y)
    expected = np.mean([clip(g, C) for g in per], axis=0)
    got = item_dp_batch_gradient(p, b, DpConfig("item", C, 0.0), np.random.default_rng(0))
    assert np.allclose(got, expected, rtol=1e-9, atol=1e-15)


def test_noisy_item_gradient_concentrates_around_clipped_mean():
    p, b = model(), make_batch(n=10)
    C, sigma = 0.5, 1.0
    exact = item_dp_batch_gradient(p, b, DpConfig("item", C, 0.0), None)
    dp = DpConfig("item", C, sigma)
    draws = np.stack([item_dp_batch_gradient(p, b, dp, np.random.default_rng(s)) for s in range(400)])
    resid = draws - exact
    # each coordinate is N(0, (sigma C / n)^2)
    assert np.std(resid) == pytest.approx(sigma * C / len(b), rel=0.05)
    assert np.all(np.abs(resid.mean(axis=0)) < 5 * sigma * C / len(b) / math.sqrt(400))


# -- subject level ----------------------------------------------------------

@pytest.mark.parametrize("C", [0.01, 0.2, math.inf])
def test_subject_dp_matches_manual_oracle(C):
    p, b = model(), make_batch(n=20, n_subjects=5, seed=3)
    got = subject_dp_batch_gradient(p, b, DpConfig("subject", C, 0.0), None)
    assert np.allclose(got, manual_subject_dp(p, b, C), rtol=1e-9, atol=1e-15)


def test_subject_dp_with_singleton_subjects_equals_item_dp():
    p = model()
    b = make_batch(n=9)
    b = PointSet(b.x, b.y, np.arange(9) + 100, b.record_ids)
    dp_s, dp_i = DpConfig("subject", 0.1, 0.0), DpConfig("item", 0.1, 0.0)
    assert np.allclose(subject_dp_batch_gradient(p, b, dp_s, None),
                       item_dp_batch_gradient(p, b, dp_i, None), rtol=1e-12, atol=1e-16)


def test_subject_dp_unclipped_equal_groups_is_batch_mean():
    p = model()
    b = make_batch(n=12)
    b = PointSet(b.x, b.y, np.repeat([7, 3, 9], 4), b.record_ids)
    got = subject_dp_batch_gradient(p, b, DpConfig("subject", math.inf, 0.0), None)
    assert np.allclose(got, per_example_gradients(p, b.x, b.y).mean(axis=0), rtol=1e-10, atol=1e-15)


def test_duplicate_points_in_one_subject_count_once():
    p = model()
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(3, 4)), np.array([0, 1, 1])
    single = PointSet(x, y, [0, 1, 2], [0, 1, 2])
    dup = PointSet(np.vstack([x, np.repeat(x[:1], 5, axis=0)]), np.r_[y, [y[0]] * 5],
                   [0, 1, 2] + [0] * 5, np.arange(8))
    dp = DpConfig("subject", 0.05, 0.0)
    assert np.allclose(subject_dp_batch_gradient(p, single, dp, None),
                       subject_dp_batch_gradient(p, dup, dp, None), rtol=1e-10, atol=1e-16)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 5.0))
def test_subject_dp_permutation_invariant(seed, C):
    p, b = model(), make_batch(n=16, n_subjects=4, seed=seed)
    perm = np.random.default_rng(seed).permutation(len(b))
    dp = DpConfig("subject", C, 0.0)
    assert np.allclose(subject_dp_batch_gradient(p, b, dp, None),
                       subject_dp_batch_gradient(p, b[perm], dp, None), rtol=1e-9, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.001, 2.0))
def test_subject_contribution_sensitivity(seed, C):
    # swapping one subject's data for anything else moves the clipped sum by at most 2C
    p = model()
    b = make_batch(n=16, n_subjects=4, seed=seed)
    other = make_batch(n=16, n_subjects=4, seed=seed + 1)
    target = b.subject_ids[0]
    keep = b.subject_ids != target
    swapped = PointSet.concat([b[np.flatnonzero(keep)],
                               PointSet(other.x[:5], other.y[:5], [target] * 5, np.arange(5) + 99)])
    groups = dpcore.subject_groups
    s1, _ = clipped_group_sum(p, b.x, b.y, groups(b.subject_ids), C)
    s2, _ = clipped_group_sum(p, swapped.x, swapped.y, groups(swapped.subject_ids), C)
    assert np.linalg.norm(s1 - s2) <= 2 * C * (1 + 1e-9)
    removed = b[np.flatnonzero(keep)]
    s3, _ = clipped_group_sum(p, removed.x, removed.y, groups(removed.subject_ids), C)
    assert np.linalg.norm(s1 - s3) <= C * (1 + 1e-9)


def test_noise_variance():
    dp = DpConfig("subject", 0.7, 1.3)
    z = dpcore.gaussian_noise(200_000, dp, np.random.default_rng(0))
    assert np.var(z) == pytest.approx((0.7 * 1.3) ** 2, rel=0.05)
    assert not dpcore.gaussian_noise(10, DpConfig("subject", 1.0, 0.0), None).any()


def test_noise_is_reproducible_per_stream():
    p, b = model(), make_batch()
    dp = DpConfig("subject", 1.0, 1.0)
    a = subject_dp_batch_gradient(p, b, dp, np.random.default_rng([1, 2]))
    c = subject_dp_batch_gradient(p, b, dp, np.random.default_rng([1, 2]))
    d = subject_dp_batch_gradient(p, b, dp, np.random.default_rng([1, 3]))
    assert np.array_equal(a, c) and not np.array_equal(a, d)


# -- user level -------------------------------------------------------------

def test_user_dp_examples():
    dp = DpConfig("user", 1.0, 0.0)
    assert np.allclose(user_dp_update([3.0, 4.0], dp, None), [0.6, 0.8])
    assert np.array_equal(user_dp_update([0.1, 0.2], dp, None), [0.1, 0.2])
    noisy = DpConfig("user", 1.0, 2.0)
    draws = np.stack([user_dp_update(np.zeros(3), noisy, np.random.default_rng(s)) for s in range(2000)])
    assert np.std(draws) == pytest.approx(2.0, rel=0.05)


def test_dp_batch_gradient_rejects_user_granularity():
    with pytest.raises(ValueError):
        dpcore.dp_batch_gradient(model(), make_batch(), DpConfig("user", 1.0, 1.0), None)


def test_config_validation_and_sentinel():
    assert DpConfig().disabled
    assert not DpConfig(clip_threshold=1.0).disabled
    assert not DpConfig(noise_multiplier=1.0).disabled
    for bad in (dict(granularity="group"), dict(clip_threshold=0.0), dict(noise_multiplier=-1.0),
                dict(delta=0.0)):
        with pytest.raises(ValueError):
            DpConfig(**bad)


# -- accounting -------------------------------------------------------------

def mixture_rdp_by_quadrature(q, sigma, alpha):
    """Renyi divergence D_alpha((1-q)N(0,s^2) + qN(1,s^2) || N(0,s^2)) by numerical integration."""
    p0 = stats.norm(0, sigma).pdf
    p1 = stats.norm(1, sigma).pdf

    def integrand(z):
        mix = (1 - q) * p0(z) + q * p1(z)
        return p0(z) * (mix / p0(z)) ** alpha

    val, _ = integrate.quad(integrand, -20 * sigma, 20 * sigma + 1, limit=400)
    return math.log(val) / (alpha - 1)


@pytest.mark.parametrize("q, sigma, alpha", [
    (0.01, 1.0, 2.0), (0.01, 1.0, 8.0), (0.1, 2.0, 3.0), (0.05, 1.5, 2.5),
    (0.02, 1.1, 1.5), (0.2, 3.0, 5.5), (0.001, 0.8, 4.0),
])
def test_subsampled_rdp_matches_quadrature(q, sigma, alpha):
    assert subsampled_gaussian_rdp(q, sigma, alpha) == pytest.approx(
        mixture_rdp_by_quadrature(q, sigma, alpha), rel=1e-4, abs=1e-12)


def test_full_batch_rdp_closed_form():
    assert subsampled_gaussian_rdp(1.0, 2.0, 4.0) == pytest.approx(4 / 8)


def test_epsilon_q1_matches_continuous_optimum():
    sigma, steps, delta = 1.8346, 20, 1e-5

    def bound(a):
        return steps * a / (2 * sigma**2) + math.log(1 / delta) / (a - 1)

    best = optimize.minimize_scalar(bound, bounds=(1.0001, 500), method="bounded").fun
    eps = report_epsilon(DpConfig("subject", 1.0, sigma, delta), 1.0, steps)
    assert eps >= best - 1e-9
    assert eps == pytest.approx(best, rel=0.10)


def test_epsilon_monotone():
    base = DpConfig("subject", 1.0, 1.0, 1e-5)
    e = report_epsilon(base, 0.01, 1000)
    assert report_epsilon(base, 0.01, 2000) > e
    assert report_epsilon(base, 0.02, 1000) > e
    assert report_epsilon(DpConfig("subject", 1.0, 2.0, 1e-5), 0.01, 1000) < e
    assert report_epsilon(DpConfig("subject", 1.0, 1.0, 1e-3), 0.01, 1000) < e


def test_epsilon_requires_noise():
    with pytest.raises(NoiseRequired):
        report_epsilon(DpConfig("subject", 1.0, 0.0), 0.1, 10)

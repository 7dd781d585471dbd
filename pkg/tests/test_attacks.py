import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subjectmia import attacks
from subjectmia.attacks import (
    LOSS_ACROSS_ROUNDS,
    LOSS_THRESHOLD,
    AttackThresholds,
    DegenerateValidation,
    LossTrace,
    RoundOutOfRange,
    TooFewRounds,
    loss_across_rounds_score,
    loss_threshold_score,
    run_attack,
    tune_thresholds,
)
from subjectmia.metrics import Metrics, compute_metrics, f1_score
from subjectmia.synthgen import PointSet


def trace(losses, sid=0):
    return LossTrace(sid, np.atleast_2d(np.asarray(losses, dtype=float)))


# -- scores -----------------------------------------------------------------

def test_loss_threshold_examples():
    t = trace([0.1, 0.5, 0.2, 0.9])
    assert loss_threshold_score(t, 0.3) == 2
    assert loss_threshold_score(t, 0.5) == 3  # inclusive
    assert loss_threshold_score(t, 0.05) == 0
    assert loss_threshold_score(t, 10.0) == 4


def test_loss_threshold_round_selection():
    t = trace([[5.0, 5.0], [0.1, 5.0], [0.1, 0.1]])
    assert loss_threshold_score(t, 1.0) == 2
    assert loss_threshold_score(t, 1.0, 1) == 1
    assert loss_threshold_score(t, 1.0, 0) == 0
    with pytest.raises(RoundOutOfRange):
        loss_threshold_score(t, 1.0, 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=30), st.floats(0, 100), st.floats(0, 100))
def test_loss_threshold_monotone_in_lambda(losses, a, b):
    t = trace(losses)
    lo, hi = min(a, b), max(a, b)
    assert loss_threshold_score(t, lo) <= loss_threshold_score(t, hi)
    assert 0 <= loss_threshold_score(t, hi) <= len(losses)


def test_loss_across_rounds_examples():
    # per-round sums 3, 2, 2, 1: two strict drops
    t = trace([[1.5, 1.5], [1.0, 1.0], [1.5, 0.5], [0.5, 0.5]])
    assert loss_across_rounds_score(t) == 2
    assert loss_across_rounds_score(trace([[1.0], [2.0], [3.0]])) == 0
    assert loss_across_rounds_score(trace([[3.0], [2.0], [1.0]])) == 2
    with pytest.raises(TooFewRounds):
        loss_across_rounds_score(trace([[1.0, 2.0]]))


def test_empty_trace_rejected():
    with pytest.raises(ValueError):
        LossTrace(0, np.zeros((2, 0)))


# -- F1 ---------------------------------------------------------------------

@pytest.mark.parametrize("p, r, f1", [(0.79, 0.89, 0.8370), (0.61, 0.88, 0.7205), (0.5, 1.0, 0.6667),
                                      (0.0, 0.0, 0.0)])
def test_f1_examples(p, r, f1):
    assert f1_score(p, r) == pytest.approx(f1, abs=5e-5)


def test_metrics_algebra():
    m = Metrics(tp=8, fp=2, tn=6, fn=4)
    assert m.precision == 0.8 and m.recall == pytest.approx(2 / 3)
    assert m.f1 == pytest.approx(2 * 8 / (2 * 8 + 2 + 4))
    assert m.accuracy == pytest.approx(0.7)
    everyone = compute_metrics([(True, True)] * 5 + [(True, False)] * 5)
    assert everyone.recall == 1.0 and everyone.precision == 0.5
    assert everyone.f1 == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        compute_metrics([])


# -- tuning -----------------------------------------------------------------

def brute_force_lt(validation):
    values = sorted({float(v) for tr, _ in validation.values() for v in tr.losses[-1]})
    cands = set(values) | {(a + b) / 2 for a, b in zip(values, values[1:])}
    max_n = max(tr.n_samples for tr, _ in validation.values())
    best, best_f1 = None, -1.0
    for lam in sorted(cands):
        for tau in range(1, max_n + 1):
            m = compute_metrics((loss_threshold_score(tr, lam) >= tau, t) for tr, t in validation.values())
            if m.f1 > best_f1 + 1e-12:
                best, best_f1 = (lam, tau), m.f1
    return best, best_f1


def brute_force_lar(validation):
    r = next(iter(validation.values()))[0].rounds
    best, best_f1 = None, -1.0
    for tau in range(r + 1):
        m = compute_metrics((loss_across_rounds_score(tr) >= tau, t) for tr, t in validation.values())
        if m.f1 > best_f1 + 1e-12:
            best, best_f1 = tau, m.f1
    return best, best_f1


def random_validation(seed, n_subjects=8, rounds=3, max_samples=5, grid=6):
    rng = np.random.default_rng(seed)
    val = {}
    for s in range(n_subjects):
        k = int(rng.integers(1, max_samples + 1))
        # coarse values so ties are common
        val[s] = (trace(rng.integers(0, grid, size=(rounds + 1, k)) / 2, s), bool(s % 2))
    return val


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_lt_tuner_matches_brute_force(seed):
    val = random_validation(seed)
    (lam, tau), f1 = brute_force_lt(val)
    th = tune_thresholds(LOSS_THRESHOLD, val)
    assert (th.lam, th.count_cutoff) == (lam, tau)
    got = compute_metrics((loss_threshold_score(tr, th.lam) >= th.count_cutoff, t) for tr, t in val.values())
    assert got.f1 == pytest.approx(f1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_lar_tuner_matches_brute_force(seed):
    val = random_validation(seed, rounds=6)
    tau, _ = brute_force_lar(val)
    assert tune_thresholds(LOSS_ACROSS_ROUNDS, val).rounds_cutoff == tau


def test_tuner_ties_prefer_smaller_lambda():
    val = {0: (trace([0.1]), True), 1: (trace([0.9]), False)}
    th = tune_thresholds(LOSS_THRESHOLD, val)
    assert th.lam == pytest.approx(0.1) and th.count_cutoff == 1


def test_tuner_at_earlier_round():
    val = {0: (trace([[0.1], [0.9]]), True), 1: (trace([[0.9], [0.1]]), False)}
    assert tune_thresholds(LOSS_THRESHOLD, val, round_index=0).lam == pytest.approx(0.1)
    # at the last round the member is the high-loss subject; the best cutoff calls everyone a member
    assert tune_thresholds(LOSS_THRESHOLD, val).lam == pytest.approx(0.9)


def test_accuracy_objective():
    val = random_validation(3)
    th = tune_thresholds(LOSS_THRESHOLD, val, objective="accuracy")
    best = max(
        compute_metrics((loss_threshold_score(tr, lam) >= tau, t) for tr, t in val.values()).accuracy
        for lam in attacks.threshold_candidates(np.concatenate([tr.losses[-1] for tr, _ in val.values()]))
        for tau in range(1, 6)
    )
    got = compute_metrics((loss_threshold_score(tr, th.lam) >= th.count_cutoff, t) for tr, t in val.values())
    assert got.accuracy == pytest.approx(best)


def test_degenerate_validation_rejected():
    val = {0: (trace([0.1]), True), 1: (trace([0.2]), True)}
    with pytest.raises(DegenerateValidation):
        tune_thresholds(LOSS_THRESHOLD, val)
    with pytest.raises(DegenerateValidation):
        tune_thresholds(LOSS_ACROSS_ROUNDS, {0: (trace([[1.0], [0.5]]), False)})


def test_threshold_candidates():
    assert np.allclose(attacks.threshold_candidates(np.array([1.0, 0.0, 1.0, 3.0])), [0, 0.5, 1, 2, 3])
    assert np.allclose(attacks.threshold_candidates(np.array([2.0])), [2.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(-10, 10))
def test_verdicts_invariant_to_loss_scale(seed, k):
    c = 2.0**k
    val = random_validation(seed)
    test = random_validation(seed + 1)
    test = {s + 100: v for s, v in test.items()}
    scaled = lambda m: {s: (LossTrace(s, tr.losses * c), t) for s, (tr, t) in m.items()}  # noqa: E731
    for kind in attacks.ATTACK_KINDS:
        a = tune_thresholds(kind, val)
        b = tune_thresholds(kind, scaled(val))
        va = [attacks.verdict(kind, attacks.score_subject(kind, tr, a), a) for tr, _ in test.values()]
        vb = [attacks.verdict(kind, attacks.score_subject(kind, tr, b), b) for tr, _ in scaled(test).values()]
        assert va == vb


# -- end to end with a fake oracle -------------------------------------------

class FakeOracle:
    """Members' samples (x[:, 0] > 0) lose loss every round; others stay flat and noisy."""

    n_snapshots = 5

    def losses(self, round_index, x, y):
        member = x[:, 0] > 0
        return np.where(member, 1.0 / (1 + round_index), 1.0 + 0.01 * np.abs(x[:, 1]))


def make_pool(n_per_class=6, samples=4, seed=0):
    rng = np.random.default_rng(seed)
    pool, labels = {}, {}
    for s in range(2 * n_per_class):
        member = s < n_per_class
        x = rng.normal(size=(samples, 2))
        x[:, 0] = np.abs(x[:, 0]) * (1 if member else -1)
        pool[s] = PointSet(x, np.zeros(samples, dtype=int), [s] * samples, np.arange(samples) + 10 * s)
        labels[s] = member
    return pool, labels


def test_black_box_attack_separates():
    pool, labels = make_pool()
    val = {s: labels[s] for s in (0, 1, 6, 7)}
    test = {s: t for s, t in labels.items() if s not in val}
    for kind in attacks.ATTACK_KINDS:
        rep = run_attack(kind, FakeOracle(), pool, val, test)
        assert rep.metrics.f1 == 1.0 and rep.metrics.accuracy == 1.0
        assert len(rep.per_round) == 5
        assert set(rep.per_subject) == set(test)
    lar = run_attack(LOSS_ACROSS_ROUNDS, FakeOracle(), pool, val, test)
    assert lar.per_round[0] is None and math.isnan(lar.per_round_f1[0])
    assert lar.thresholds.rounds_cutoff >= 1


def test_run_attack_rejects_overlap_and_unknown_kind():
    pool, labels = make_pool()
    with pytest.raises(ValueError):
        run_attack(LOSS_THRESHOLD, FakeOracle(), pool, {0: True, 6: False}, {0: True, 7: False})
    with pytest.raises(ValueError):
        run_attack("shadow-model", FakeOracle(), pool, {0: True, 6: False}, {1: True, 7: False})


def test_collect_losses_rejects_empty_samples():
    empty = PointSet(np.zeros((0, 2)), [], [], [])
    with pytest.raises(attacks.EmptySamples):
        attacks.collect_losses(FakeOracle(), {3: empty})


def test_collect_losses_matches_direct_queries():
    pool, _ = make_pool()
    traces = attacks.collect_losses(FakeOracle(), pool)
    for sid, ps in pool.items():
        for r in range(5):
            assert np.array_equal(traces[sid].losses[r], FakeOracle().losses(r, ps.x, ps.y))


def test_attack_csvs(tmp_path):
    pool, labels = make_pool()
    val = {s: labels[s] for s in (0, 6)}
    test = {s: t for s, t in labels.items() if s not in val}
    rep = run_attack(LOSS_ACROSS_ROUNDS, FakeOracle(), pool, val, test)
    with open(attacks.write_subject_csv(rep, tmp_path / "s.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["subject_id", "score", "verdict", "truth"]
    assert len(rows) == len(test)
    with open(attacks.write_round_csv(rep, tmp_path / "r.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["round", "f1", "precision", "recall"]
    assert rows[0]["f1"] == "" and float(rows[-1]["f1"]) == 1.0
    assert AttackThresholds(rounds_cutoff=rep.thresholds.rounds_cutoff) == rep.thresholds

"""Loss-based subject membership inference.

Both attacks see the target only through a loss oracle: give it a round index
and labelled points, get back per-point losses.  Nothing here reads model
parameters.

* Loss-Threshold: a subject's score is the number of its samples whose loss at
  one round is at most ``lam``; the subject is called a member when the score
  reaches ``count_cutoff``.
* Loss-Across-Rounds: a subject's score is the number of rounds in which the
  summed loss over its samples strictly dropped; members reach ``rounds_cutoff``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .metrics import Metrics, compute_metrics

LOSS_THRESHOLD = "loss-threshold"
LOSS_ACROSS_ROUNDS = "loss-across-rounds"
ATTACK_KINDS = (LOSS_THRESHOLD, LOSS_ACROSS_ROUNDS)


class EmptySamples(ValueError):
    pass


class RoundOutOfRange(IndexError):
    pass


class TooFewRounds(ValueError):
    pass


class DegenerateValidation(ValueError):
    pass


class LossOracle(Protocol):
    n_snapshots: int

    def losses(self, round_index: int, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...


class SnapshotOracle:
    """Loss API over a list of model snapshots (the per-round global models)."""

    def __init__(self, snapshots):
        if not snapshots:
            raise ValueError("no snapshots")
        self._snapshots = list(snapshots)

    @property
    def n_snapshots(self) -> int:
        return len(self._snapshots)

    def losses(self, round_index, x, y):
        from .nnet import per_example_loss

        return per_example_loss(self._snapshots[round_index].params, x, y)


@dataclass
class LossTrace:
    """Losses of one subject's attack samples, shape ``(rounds + 1, n_samples)``."""

    subject_id: int
    losses: np.ndarray

    def __post_init__(self):
        self.losses = np.asarray(self.losses, dtype=np.float64)
        if self.losses.ndim != 2 or self.losses.size == 0:
            raise ValueError("a loss trace needs at least one round and one sample")

    @property
    def rounds(self) -> int:
        return self.losses.shape[0] - 1

    @property
    def n_samples(self) -> int:
        return self.losses.shape[1]

    def upto(self, round_index: int) -> "LossTrace":
        return LossTrace(self.subject_id, self.losses[: round_index + 1])


@dataclass(frozen=True)
class AttackThresholds:
    lam: float | None = None
    count_cutoff: int | None = None
    rounds_cutoff: int | None = None


@dataclass
class AttackReport:
    kind: str
    thresholds: AttackThresholds
    per_subject: dict  # subject_id -> (score, verdict, truth)
    metrics: Metrics
    per_round: list = field(default_factory=list)  # Metrics per round, None where undefined

    @property
    def per_round_f1(self) -> np.ndarray:
        return np.array([m.f1 if m is not None else math.nan for m in self.per_round])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "thresholds": {
                "lam": self.thresholds.lam,
                "count_cutoff": self.thresholds.count_cutoff,
                "rounds_cutoff": self.thresholds.rounds_cutoff,
            },
            "metrics": self.metrics.to_dict(),
            "per_subject": [
                {"subject_id": int(s), "score": int(sc), "verdict": bool(v), "truth": bool(t)}
                for s, (sc, v, t) in sorted(self.per_subject.items())
            ],
            "per_round": [m.to_dict() if m is not None else None for m in self.per_round],
        }


def _as_oracle(model) -> LossOracle:
    if hasattr(model, "losses") and hasattr(model, "n_snapshots"):
        return model
    return SnapshotOracle(model)


def collect_losses(model, samples: Mapping[int, "object"]) -> dict[int, LossTrace]:
    """Query every round's model on every subject's samples.

    `model` is a loss oracle or a list of snapshots; `samples` maps subject id
    to a :class:`~subjectmia.synthgen.PointSet`.
    """
    oracle = _as_oracle(model)
    sids = list(samples)
    for sid in sids:
        if len(samples[sid]) == 0:
            raise EmptySamples(f"subject {sid} has no attack samples")
    if not sids:
        return {}
    x = np.concatenate([samples[s].x for s in sids])
    y = np.concatenate([samples[s].y for s in sids])
    bounds = np.cumsum([0] + [len(samples[s]) for s in sids])
    table = np.stack([np.asarray(oracle.losses(r, x, y)) for r in range(oracle.n_snapshots)])
    return {
        sid: LossTrace(sid, table[:, bounds[k]:bounds[k + 1]])
        for k, sid in enumerate(sids)
    }


def loss_threshold_score(trace: LossTrace, lam: float, round_index: int | None = None) -> int:
    """Number of samples with loss <= `lam` at `round_index` (default: last round)."""
    if round_index is None:
        round_index = trace.rounds
    if not 0 <= round_index <= trace.rounds:
        raise RoundOutOfRange(f"round {round_index} outside 0..{trace.rounds}")
    return int(np.count_nonzero(trace.losses[round_index] <= lam))


def loss_across_rounds_score(trace: LossTrace) -> int:
    """Number of rounds whose summed sample loss strictly decreased."""
    if trace.rounds < 1:
        raise TooFewRounds("need at least two snapshots")
    sums = trace.losses.sum(axis=1)
    return int(np.count_nonzero(sums[1:] < sums[:-1]))


def _objective(tp, fp, n_pos, n_neg, objective: str):
    tp = np.asarray(tp, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    fn = n_pos - tp
    if objective == "f1":
        denom = 2 * tp + fp + fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)
    if objective == "accuracy":
        return (tp + (n_neg - fp)) / (n_pos + n_neg)
    raise ValueError(f"unknown objective {objective!r}")


def threshold_candidates(values: np.ndarray) -> np.ndarray:
    """Distinct observed values and the midpoints between neighbours, ascending."""
    u = np.unique(values)
    mids = (u[:-1] + u[1:]) / 2
    out = np.empty(len(u) + len(mids))
    out[0::2] = u
    out[1::2] = mids
    # midpoints of adjacent floats can round onto an endpoint
    return np.unique(out)


def _split_validation(validation):
    truths = np.array([bool(t) for _, t in validation.values()])
    if truths.all() or not truths.any():
        raise DegenerateValidation("validation needs at least one member and one non-member")
    return [tr for tr, _ in validation.values()], truths


def tune_thresholds(kind: str, validation: Mapping[int, tuple[LossTrace, bool]],
                    objective: str = "f1", round_index: int | None = None) -> AttackThresholds:
    """Pick attack thresholds maximising `objective` on labelled validation subjects.

    Ties go to the smaller ``lam``, then the smaller cutoff.
    """
    traces, truths = _split_validation(validation)
    n_pos, n_neg = int(truths.sum()), int((~truths).sum())
    if kind == LOSS_THRESHOLD:
        rows = [tr.losses[tr.rounds if round_index is None else round_index] for tr in traces]
        cands = threshold_candidates(np.concatenate(rows))
        max_n = max(len(r) for r in rows)
        counts = np.stack([np.searchsorted(np.sort(r), cands, side="right") for r in rows], axis=1)
        width = max_n + 1
        k_idx = np.arange(len(cands))[:, None]

        def tail_hist(cols):
            flat = (k_idx * width + counts[:, cols]).ravel()
            hist = np.bincount(flat, minlength=len(cands) * width).reshape(len(cands), width)
            # hist[k, c] -> number of subjects whose count is >= c
            return np.cumsum(hist[:, ::-1], axis=1)[:, ::-1]

        tp = tail_hist(truths)[:, 1:]
        fp = tail_hist(~truths)[:, 1:]
        score = _objective(tp, fp, n_pos, n_neg, objective)
        k, c = np.unravel_index(int(np.argmax(score)), score.shape)
        return AttackThresholds(lam=float(cands[k]), count_cutoff=int(c) + 1)
    if kind == LOSS_ACROSS_ROUNDS:
        scores = np.array([loss_across_rounds_score(tr) for tr in traces])
        r = traces[0].rounds
        taus = np.arange(r + 1)
        pred = scores[None, :] >= taus[:, None]
        tp = (pred & truths).sum(axis=1)
        fp = (pred & ~truths).sum(axis=1)
        best = int(np.argmax(_objective(tp, fp, n_pos, n_neg, objective)))
        return AttackThresholds(rounds_cutoff=int(taus[best]))
    raise ValueError(f"unknown attack kind {kind!r}")


def score_subject(kind: str, trace: LossTrace, th: AttackThresholds,
                  round_index: int | None = None) -> int:
    if kind == LOSS_THRESHOLD:
        return loss_threshold_score(trace, th.lam, round_index)
    return loss_across_rounds_score(trace)


def verdict(kind: str, score: int, th: AttackThresholds) -> bool:
    cutoff = th.count_cutoff if kind == LOSS_THRESHOLD else th.rounds_cutoff
    return score >= cutoff


def _evaluate(kind, traces, validation_labels, test_labels, objective, round_index):
    """Tune on validation and score test subjects at one round (or round prefix)."""
    if kind == LOSS_ACROSS_ROUNDS:
        cut = lambda tr: tr.upto(round_index)  # noqa: E731
        at = None
    else:
        cut = lambda tr: tr  # noqa: E731
        at = round_index
    val = {s: (cut(traces[s]), t) for s, t in validation_labels.items()}
    th = tune_thresholds(kind, val, objective, at)
    per_subject = {}
    for s, truth in test_labels.items():
        sc = score_subject(kind, cut(traces[s]), th, at)
        per_subject[s] = (sc, verdict(kind, sc, th), bool(truth))
    metrics = compute_metrics((v, t) for _, v, t in per_subject.values())
    return th, per_subject, metrics


def run_attack(kind: str, model, attack_pool: Mapping, validation_labels: Mapping[int, bool],
               test_labels: Mapping[int, bool], objective: str = "f1",
               traces: Mapping[int, LossTrace] | None = None) -> AttackReport:
    """Tune on validation subjects, then attack the test subjects.

    Per-round metrics re-tune at every round: Loss-Threshold uses that round's
    losses, Loss-Across-Rounds uses the rounds up to it (undefined at round 0).
    Precomputed `traces` may be passed to skip querying the model.
    """
    if kind not in ATTACK_KINDS:
        raise ValueError(f"unknown attack kind {kind!r}")
    overlap = set(validation_labels) & set(test_labels)
    if overlap:
        raise ValueError(f"validation and test subjects overlap: {sorted(overlap)[:5]}")
    if traces is None:
        wanted = {s: attack_pool[s] for s in (*validation_labels, *test_labels)}
        traces = collect_losses(model, wanted)
    final = next(iter(traces.values())).rounds
    th, per_subject, metrics = _evaluate(kind, traces, validation_labels, test_labels,
                                         objective, final)
    per_round = []
    for r in range(final + 1):
        if kind == LOSS_ACROSS_ROUNDS and r == 0:
            per_round.append(None)
            continue
        per_round.append(_evaluate(kind, traces, validation_labels, test_labels, objective, r)[2])
    return AttackReport(kind, th, per_subject, metrics, per_round)


def write_subject_csv(report: AttackReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "score", "verdict", "truth"])
        for sid, (score, v, t) in sorted(report.per_subject.items()):
            w.writerow([sid, score, int(v), int(t)])
    return path


def write_round_csv(report: AttackReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "f1", "precision", "recall"])
        for r, m in enumerate(report.per_round):
            if m is None:
                w.writerow([r, "", "", ""])
            else:
                w.writerow([r, f"{m.f1:.6g}", f"{m.precision:.6g}", f"{m.recall:.6g}"])
    return path

"""Confusion counts and the scores derived from them."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)

    @property
    def accuracy(self) -> float:
        total = self.tp + self.fp + self.tn + self.fn
        return (self.tp + self.tn) / total if total else 0.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(accuracy=self.accuracy, precision=self.precision,
                   recall=self.recall, f1=self.f1)
        return out


def compute_metrics(verdicts: Iterable[tuple[bool, bool]]) -> Metrics:
    """Confusion counts from ``(predicted_member, is_member)`` pairs."""
    tp = fp = tn = fn = 0
    n = 0
    for pred, truth in verdicts:
        n += 1
        if pred and truth:
            tp += 1
        elif pred:
            fp += 1
        elif truth:
            fn += 1
        else:
            tn += 1
    if n == 0:
        raise ValueError("no verdicts to score")
    return Metrics(tp, fp, tn, fn)

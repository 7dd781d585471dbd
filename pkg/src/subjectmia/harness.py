"""End-to-end experiments: generate, train, attack, report."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks, dpcore, fedsim, nnet
from .config import FederationConfig
from .metrics import compute_metrics
from .synthgen import Federation, PointSet, build_federation

log = logging.getLogger(__name__)

_SPLIT_STREAM = 201


class InsufficientSubjects(ValueError):
    pass


def split_attack_subjects(members, nonmembers, validation_count: int, rng: np.random.Generator):
    """Subject-disjoint split into validation and test label maps.

    Validation receives `validation_count` members and as many non-members;
    everything else is test.  Each class must keep at least one test subject.
    """
    members = sorted(members)
    nonmembers = sorted(nonmembers)
    if validation_count < 1:
        raise InsufficientSubjects("validation_count must be at least 1")
    if validation_count >= len(members) or validation_count >= len(nonmembers):
        raise InsufficientSubjects(
            f"{validation_count} validation subjects per class leaves no test subjects "
            f"({len(members)} members, {len(nonmembers)} non-members)"
        )
    m = rng.permutation(members)
    n = rng.permutation(nonmembers)
    validation = {int(s): True for s in m[:validation_count]}
    validation.update({int(s): False for s in n[:validation_count]})
    test = {int(s): True for s in m[validation_count:]}
    test.update({int(s): False for s in n[validation_count:]})
    return validation, test


def default_validation_count(n_members: int, n_nonmembers: int) -> int:
    return max(1, min(100, min(n_members, n_nonmembers) // 2))


def accuracy(params: nnet.ModelParams, points: PointSet, weights=None) -> float:
    rows, counts = weights or fedsim.distinct_weights(points)
    pred = nnet.logits(params, points.x[rows]) >= 0
    return float(np.sum(counts * (pred == points.y[rows].astype(bool))) / counts.sum())


def mean_train_loss(params: nnet.ModelParams, fed: Federation, weights=None) -> float:
    """Mean loss over every training record of every shard."""
    weights = weights or [fedsim.distinct_weights(s.points) for s in fed.shards]
    total, n = 0.0, 0
    for shard, (rows, counts) in zip(fed.shards, weights):
        pts = shard.points
        total += float(counts @ nnet.per_example_loss(params, pts.x[rows], pts.y[rows]))
        n += int(counts.sum())
    return total / n


def round_config(cfg: FederationConfig) -> fedsim.RoundConfig:
    return fedsim.RoundConfig(
        local_epochs=cfg.local_epochs,
        batch_size=cfg.batch_size,
        optimizer=nnet.OptimizerState(kind=cfg.optimizer, learning_rate=cfg.learning_rate),
        participation=cfg.participation,
    )


def epsilon_for(cfg: FederationConfig) -> float | None:
    """Reported epsilon for the configured DP run, if requested and noisy."""
    dp = cfg.dp
    if dp is None or not dp.report_epsilon or dp.noise_multiplier == 0:
        return None
    if dp.granularity == "user":
        return dpcore.report_epsilon(dp, cfg.participation, max(cfg.rounds, 1))
    q = min(1.0, cfg.batch_size / cfg.items_per_user)
    steps = cfg.rounds * cfg.local_epochs * math.ceil(cfg.items_per_user / cfg.batch_size)
    return dpcore.report_epsilon(dp, q, max(steps, 1))


@dataclass
class ExperimentReport:
    config: dict
    config_hash: str
    seed: int
    train_loss: list
    test_accuracy: list
    attacks: dict  # kind -> AttackReport
    wall_clock: float = 0.0
    epsilon: float | None = None
    counts: dict = field(default_factory=dict)

    @property
    def final_accuracy(self) -> float:
        return self.test_accuracy[-1]

    def to_dict(self, include_wall_clock: bool = True) -> dict:
        out = {
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "train_loss": self.train_loss,
            "test_accuracy": self.test_accuracy,
            "attacks": {k: r.to_dict() for k, r in self.attacks.items()},
            "epsilon": self.epsilon,
            "counts": self.counts,
        }
        if include_wall_clock:
            out["wall_clock"] = self.wall_clock
        return out


def evaluate_rounds(snapshots, fed: Federation):
    train_w = [fedsim.distinct_weights(s.points) for s in fed.shards]
    test_w = fedsim.distinct_weights(fed.test_set)
    losses = [mean_train_loss(s.params, fed, train_w) for s in snapshots]
    accs = [accuracy(s.params, fed.test_set, test_w) for s in snapshots]
    return losses, accs


def attack_federation(cfg: FederationConfig, fed: Federation, snapshots,
                      kinds=attacks.ATTACK_KINDS) -> dict:
    """Run the requested attacks against trained snapshots of `fed`."""
    k = cfg.validation_subject_count
    if k is None:
        k = default_validation_count(len(fed.member_subjects), len(fed.nonmember_subjects))
    rng = np.random.default_rng([cfg.seed, _SPLIT_STREAM])
    validation, test = split_attack_subjects(fed.member_subjects, fed.nonmember_subjects, k, rng)
    wanted = {s: fed.attack_pool[s] for s in (*validation, *test)}
    traces = attacks.collect_losses(attacks.SnapshotOracle(snapshots), wanted)
    return {
        kind: attacks.run_attack(kind, None, fed.attack_pool, validation, test,
                                 cfg.objective, traces=traces)
        for kind in kinds
    }


def train(cfg: FederationConfig, fed: Federation | None = None):
    """Build (unless given) and train the federation; returns ``(fed, snapshots)``."""
    fed = fed if fed is not None else build_federation(cfg)
    spec = nnet.MlpSpec(cfg.d, cfg.hidden)
    snapshots = fedsim.train_federation(fed, spec, round_config(cfg), cfg.rounds, cfg.dp, cfg.seed)
    return fed, snapshots


def assess(cfg: FederationConfig, fed: Federation, snapshots, kinds=attacks.ATTACK_KINDS,
           started: float | None = None) -> ExperimentReport:
    """Evaluate trained snapshots and attack them."""
    if len(snapshots) < 2 and attacks.LOSS_ACROSS_ROUNDS in kinds:
        log.warning("loss-across-rounds needs at least one training round; skipped")
        kinds = tuple(k for k in kinds if k != attacks.LOSS_ACROSS_ROUNDS)
    train_loss, test_acc = evaluate_rounds(snapshots, fed)
    reports = attack_federation(cfg, fed, snapshots, kinds)
    return ExperimentReport(
        config=cfg.to_dict(),
        config_hash=cfg.config_hash(),
        seed=cfg.seed,
        train_loss=train_loss,
        test_accuracy=test_acc,
        attacks=reports,
        wall_clock=0.0 if started is None else time.perf_counter() - started,
        epsilon=epsilon_for(cfg),
        counts={"members": len(fed.member_subjects), "nonmembers": len(fed.nonmember_subjects)},
    )


def run_experiment(cfg: FederationConfig, out_dir=None, save_snapshots: bool = False,
                   kinds=attacks.ATTACK_KINDS) -> ExperimentReport:
    """Generate the federation, train it, attack it and optionally persist everything."""
    t0 = time.perf_counter()
    fed, snapshots = train(cfg)
    report = assess(cfg, fed, snapshots, kinds, t0)
    if out_dir is not None:
        write_outputs(report, out_dir, snapshots if save_snapshots else None)
    return report


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def per_round_rows(report: ExperimentReport) -> list[list]:
    lt = report.attacks.get(attacks.LOSS_THRESHOLD)
    lar = report.attacks.get(attacks.LOSS_ACROSS_ROUNDS)
    rows = []
    for r in range(len(report.test_accuracy)):
        row = [r, f"{report.train_loss[r]:.6g}", f"{report.test_accuracy[r]:.6g}"]
        for rep in (lt, lar):
            f1 = rep.per_round_f1[r] if rep is not None else math.nan
            row.append("" if math.isnan(f1) else f"{f1:.6g}")
        rows.append(row)
    return rows


def write_outputs(report: ExperimentReport, out_dir, snapshots=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if snapshots is not None:
        fedsim.save_snapshots(snapshots, out / "snapshots")
    with open(out / "per_round.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "train_loss", "test_acc", "f1_lt", "f1_lar"])
        w.writerows(per_round_rows(report))
    for kind, rep in report.attacks.items():
        attacks.write_subject_csv(rep, out / f"{kind}_subjects.csv")
        attacks.write_round_csv(rep, out / f"{kind}_rounds.csv")
    # report.json last: its presence marks the run complete
    atomic_write_text(out / "report.json", json.dumps(report.to_dict(), indent=1))
    return out


def summary_row(report: dict) -> dict:
    """Flat row of final metrics from a serialized report."""
    row = {"model_accuracy": report["test_accuracy"][-1]}
    for kind, rep in report["attacks"].items():
        tag = "lt" if kind == attacks.LOSS_THRESHOLD else "lar"
        for key in ("accuracy", "precision", "recall", "f1"):
            row[f"{tag}_{key}"] = rep["metrics"][key]
    row["epsilon"] = report.get("epsilon")
    return row


def recompute_metrics(rep: attacks.AttackReport):
    return compute_metrics((v, t) for _, v, t in rep.per_subject.values())

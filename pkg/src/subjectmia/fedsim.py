"""FedAvg over user shards, publishing the global model after every round."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import dpcore, nnet
from .synthgen import Federation, PointSet, UserShard

# SeedSequence stream tags
_INIT = 101
_SELECT = 102
_DATA = 103
_NOISE = 104
_UPDATE_NOISE = 105


class EmptyShard(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelSnapshot:
    round_index: int
    params: nnet.ModelParams


@dataclass
class RoundConfig:
    local_epochs: int = 1
    batch_size: int = 512
    optimizer: nnet.OptimizerState = field(default_factory=nnet.OptimizerState)
    participation: float = 1.0

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0 < self.participation <= 1:
            raise ValueError("participation must lie in (0, 1]")


def _seed(seed) -> list[int]:
    return [int(s) for s in seed] if isinstance(seed, (list, tuple)) else [int(seed)]


def client_stream(seed, round_index: int, user_id: int) -> tuple:
    """Key of the RNG streams a client uses in one round."""
    return (*_seed(seed), round_index, user_id)


def distinct_weights(points: PointSet, idx=None) -> tuple[np.ndarray, np.ndarray]:
    """Representative row indices and multiplicities of the distinct (x, y) pairs in ``points[idx]``."""
    if idx is None:
        idx = np.arange(len(points))
    keys = points.row_keys[idx] * 2 + points.y[idx]
    _, first, counts = np.unique(keys, return_index=True, return_counts=True)
    return idx[first], counts


def _batch_gradient(params: nnet.ModelParams, points: PointSet, idx: np.ndarray) -> np.ndarray:
    # Dirichlet shards repeat rows heavily; back-propagate each distinct row once
    rows, counts = distinct_weights(points, idx)
    if len(rows) == len(idx):
        return nnet.batch_gradient(params, points.x[idx], points.y[idx])
    terms = nnet.backprop_terms(params, points.x[rows], points.y[rows])
    return nnet.gradient_from_terms(terms, counts / len(idx))


def _active_dp(dp):
    return None if dp is None or dp.disabled else dp


def local_train(global_params: nnet.ModelParams, shard: UserShard | PointSet,
                rc: RoundConfig, dp: dpcore.DpConfig | None = None,
                stream=(0,)) -> nnet.ModelParams:
    """Run ``rc.local_epochs`` shuffled mini-batch passes starting from `global_params`.

    Optimizer state starts fresh on every call.  Batch order comes from the
    stream ``(*stream, DATA)``; DP noise for batch ``b`` of epoch ``e`` from
    ``(*stream, NOISE, e, b)``, so toggling DP leaves the data order unchanged.
    Item- and subject-level DP replace the batch gradient; user-level DP is
    applied to the returned update by :func:`train_federation`.
    """
    points = shard.points if isinstance(shard, UserShard) else shard
    n = len(points)
    if n == 0:
        raise EmptyShard("cannot train on an empty shard")
    dp = _active_dp(dp)
    batch_dp = dp if dp is not None and dp.granularity != "user" else None
    stream = _seed(stream)
    data_rng = np.random.default_rng([*stream, _DATA])
    params = global_params.copy()
    opt = rc.optimizer.fresh(params.spec.n_params)
    for epoch in range(rc.local_epochs):
        order = data_rng.permutation(n)
        for b, start in enumerate(range(0, n, rc.batch_size)):
            idx = order[start:start + rc.batch_size]
            if batch_dp is None:
                grad = _batch_gradient(params, points, idx)
            else:
                noise_rng = np.random.default_rng([*stream, _NOISE, epoch, b])
                grad = dpcore.dp_batch_gradient(params, points[idx], batch_dp, noise_rng)
            params, opt = nnet.optimizer_step(opt, params, grad)
    return params


def aggregate(updates: Sequence[tuple[nnet.ModelParams, float]]) -> nnet.ModelParams:
    """Weighted coordinate-wise mean, weights normalised to sum to one.

    Summation runs in the given order.
    """
    if not updates:
        raise ValueError("nothing to aggregate")
    spec = updates[0][0].spec
    total_w = 0.0
    for p, w in updates:
        if p.spec != spec or p.flat.shape != updates[0][0].flat.shape:
            raise ShapeMismatch("updates have different shapes")
        if not w > 0:
            raise ValueError("aggregation weights must be positive")
        total_w += w
    acc = np.zeros_like(updates[0][0].flat)
    for p, w in updates:
        acc += (w / total_w) * p.flat
    return nnet.ModelParams(spec, acc)


def select_users(n_users: int, participation: float, seed, round_index: int) -> np.ndarray:
    k = math.ceil(participation * n_users)
    if k >= n_users:
        return np.arange(n_users)
    rng = np.random.default_rng([*_seed(seed), _SELECT, round_index])
    return np.sort(rng.choice(n_users, size=k, replace=False))


def initial_params(spec: nnet.MlpSpec, seed) -> nnet.ModelParams:
    return nnet.init_params(spec, np.random.default_rng([*_seed(seed), _INIT]))


def train_federation(fed: Federation, spec: nnet.MlpSpec, rc: RoundConfig, rounds: int,
                     dp: dpcore.DpConfig | None = None, seed=0,
                     on_round: Callable[[ModelSnapshot], None] | None = None) -> list[ModelSnapshot]:
    """Train with FedAvg and return snapshots ``0..rounds`` (0 is the initialisation)."""
    if rounds < 0:
        raise ValueError("rounds must be non-negative")
    dp = _active_dp(dp)
    user_dp = dp if dp is not None and dp.granularity == "user" else None
    current = initial_params(spec, seed)
    snapshots = [ModelSnapshot(0, current)]
    if on_round:
        on_round(snapshots[0])
    for r in range(1, rounds + 1):
        updates = []
        for u in select_users(fed.n_users, rc.participation, seed, r):
            shard = fed.shards[u]
            stream = client_stream(seed, r, shard.user_id)
            local = local_train(current, shard, rc, dp, stream)
            if user_dp is not None:
                noise_rng = np.random.default_rng([*stream, _UPDATE_NOISE])
                delta = dpcore.user_dp_update(local.flat - current.flat, user_dp, noise_rng)
                local = nnet.ModelParams(spec, current.flat + delta)
            updates.append((local, float(len(shard))))
        current = aggregate(updates)
        snapshots.append(ModelSnapshot(r, current))
        if on_round:
            on_round(snapshots[-1])
    return snapshots


def train_centralized(points: PointSet, spec: nnet.MlpSpec, rc: RoundConfig, rounds: int,
                      seed=0, user_id: int = 0) -> list[ModelSnapshot]:
    """Plain training on one dataset with the client seed discipline of user `user_id`."""
    current = initial_params(spec, seed)
    snapshots = [ModelSnapshot(0, current)]
    for r in range(1, rounds + 1):
        current = local_train(current, points, rc, None, client_stream(seed, r, user_id))
        snapshots.append(ModelSnapshot(r, current))
    return snapshots


def save_snapshots(snapshots: Sequence[ModelSnapshot], directory) -> Path:
    """Write ``round_{i}.npz`` checkpoints into `directory`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in snapshots:
        nnet.save_params(s.params, directory / f"round_{s.round_index}.npz")
    return directory


def load_snapshots(directory) -> list[ModelSnapshot]:
    directory = Path(directory)
    found = {}
    for path in directory.glob("round_*.npz"):
        found[int(path.stem.split("_", 1)[1])] = nnet.load_params(path)
    if sorted(found) != list(range(len(found))):
        raise ValueError(f"snapshot rounds in {directory} are not contiguous from 0")
    return [ModelSnapshot(i, found[i]) for i in range(len(found))]

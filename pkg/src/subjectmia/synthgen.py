"""Synthetic cross-silo federations built from per-subject Gaussian distributions.

Every subject is a diagonal Gaussian.  Points are labelled with the parity of
their non-negative coordinates, so the decision boundary is the set of
coordinate hyperplanes and its complexity grows with dimensionality.

Subjects sampled in ``"dirichlet"`` mode keep one Chinese-restaurant process
for their whole lifetime: training shards, attack samples and test points all
continue the same restaurant, i.e. they are draws from a single realisation of
``DP(alpha, N(mean, cov))``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import special
from scipy.spatial import cKDTree

FORMAT_VERSION = 1

MIN_SEPARATION = 0.35
COV_RANGE = (0.0025, 0.0225)
SAMPLING_MODES = ("standard", "dirichlet")

# RNG stream tags; combined with the federation seed through SeedSequence.
_STREAM_SUBJECTS = 11
_STREAM_ASSIGN = 12
_STREAM_SAMPLE = 13
_STREAM_ITEM_POOL = 14


class SeparationInfeasible(RuntimeError):
    """Subject means could not be separated within the resample budget."""


@dataclass(frozen=True)
class SubjectSpec:
    subject_id: int
    mean: np.ndarray
    covariance: np.ndarray  # diagonal entries
    sampling: str = "standard"
    alpha: float = 1.0

    def __post_init__(self):
        if self.sampling not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.sampling!r}")
        if np.any(self.covariance <= 0):
            raise ValueError("covariance entries must be strictly positive")
        if self.sampling == "dirichlet" and not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def dim(self) -> int:
        return len(self.mean)


@dataclass(frozen=True)
class LabeledPoint:
    x: np.ndarray
    y: int
    subject_id: int
    record_id: int = -1


def distinct_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(first, inverse)``: index of one representative per distinct row, and
    the representative's position for every row, so ``x[first][inverse] == x``."""
    x = np.ascontiguousarray(x)
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    view = x.view(np.dtype((np.void, x.dtype.itemsize * x.shape[1])))[:, 0]
    _, first, inverse = np.unique(view, return_index=True, return_inverse=True)
    return first, inverse.ravel()


@dataclass
class PointSet:
    """Column-oriented collection of labelled points.

    ``record_ids`` are unique across a federation; two records may still carry
    identical ``x`` values under Dirichlet sampling.
    """

    x: np.ndarray
    y: np.ndarray
    subject_ids: np.ndarray
    record_ids: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise ValueError("x must be a 2-D array of row vectors")
        self.y = np.asarray(self.y, dtype=np.int8)
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64)
        self.record_ids = np.asarray(self.record_ids, dtype=np.int64)
        n = len(self.x)
        if not (len(self.y) == len(self.subject_ids) == len(self.record_ids) == n):
            raise ValueError("PointSet columns differ in length")

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, idx) -> "PointSet":
        idx = np.atleast_1d(np.arange(len(self))[idx])
        return PointSet(self.x[idx], self.y[idx], self.subject_ids[idx], self.record_ids[idx])

    def __iter__(self) -> Iterator[LabeledPoint]:
        for i in range(len(self)):
            yield self.point(i)

    def point(self, i: int) -> LabeledPoint:
        return LabeledPoint(self.x[i], int(self.y[i]), int(self.subject_ids[i]), int(self.record_ids[i]))

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def row_keys(self) -> np.ndarray:
        """Integer id per row; equal ids mean bitwise-equal ``x``.  Computed once."""
        keys = self.__dict__.get("_row_keys")
        if keys is None:
            keys = distinct_rows(self.x)[1]
            self.__dict__["_row_keys"] = keys
        return keys

    @classmethod
    def from_points(cls, points: Sequence[LabeledPoint]) -> "PointSet":
        return cls(
            np.stack([p.x for p in points]),
            [p.y for p in points],
            [p.subject_id for p in points],
            [p.record_id for p in points],
        )

    @classmethod
    def concat(cls, parts: Sequence["PointSet"]) -> "PointSet":
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.subject_ids for p in parts]),
            np.concatenate([p.record_ids for p in parts]),
        )


@dataclass
class UserShard:
    user_id: int
    points: PointSet

    @property
    def subject_ids_present(self) -> frozenset:
        return frozenset(int(s) for s in np.unique(self.points.subject_ids))

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class Federation:
    shards: list[UserShard]
    member_subjects: frozenset
    nonmember_subjects: frozenset
    specs: dict[int, SubjectSpec]
    attack_pool: dict[int, PointSet]
    test_set: PointSet
    access_mode: str = "distribution"
    assignments: dict[int, tuple] = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.shards)

    def truth(self, subject_id: int) -> bool:
        return subject_id in self.member_subjects


def label(x) -> np.ndarray | int:
    """Parity of the indicator ``x_i >= 0`` over the last axis.

    Works on a single vector (returns an int) or a matrix of row vectors.
    """
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("cannot label an empty vector")
    bits = np.count_nonzero(x >= 0, axis=-1) % 2
    if np.ndim(bits) == 0:
        return int(bits)
    return bits.astype(np.int8)


def mean_box_halfwidth(n_subjects: int, d: int, separation: float = MIN_SEPARATION,
                       occupancy: float = 0.05) -> float:
    """Half-width of the cube means are drawn from.

    The default cube is [-1, 1]^d.  In low dimension that cube cannot hold many
    separated means, so it is widened until the balls of radius
    ``separation / 2`` fill at most ``occupancy`` of its volume.
    """
    r = separation / 2
    log_ball = (d / 2) * math.log(math.pi) - special.gammaln(d / 2 + 1) + d * math.log(r)
    log_side = (math.log(n_subjects) + log_ball - math.log(occupancy)) / d
    return max(1.0, 0.5 * math.exp(log_side))


def _close_pairs(means: np.ndarray, separation: float) -> np.ndarray:
    """Indices (i, j), i < j, of mean pairs with distance <= separation."""
    n, d = means.shape
    if n < 2:
        return np.empty((0, 2), dtype=np.int64)
    if d <= 16:
        return cKDTree(means).query_pairs(separation, output_type="ndarray")
    sq = np.einsum("ij,ij->i", means, means)
    found = []
    block = max(1, 4_000_000 // n)
    for start in range(0, n, block):
        stop = min(n, start + block)
        dist2 = sq[start:stop, None] + sq[None, :] - 2.0 * means[start:stop] @ means.T
        i, j = np.nonzero(dist2 <= separation**2 + 1e-9)
        i = i + start
        keep = i < j
        found.append(np.stack([i[keep], j[keep]], axis=1))
    pairs = np.concatenate(found)
    if len(pairs):
        # the Gram expansion is inexact; settle borderline pairs directly
        exact = np.linalg.norm(means[pairs[:, 0]] - means[pairs[:, 1]], axis=1)
        pairs = pairs[exact <= separation]
    return pairs


def generate_subjects(
    n_subjects: int,
    d: int,
    sampling: str = "standard",
    rng_seed=0,
    *,
    alpha: float = 1.0,
    separation: float = MIN_SEPARATION,
    max_resamples: int = 10_000,
    box: float | None = None,
) -> list[SubjectSpec]:
    """Draw subject distributions whose means are pairwise more than `separation` apart.

    Means are uniform on ``[-box, box]^d`` (see :func:`mean_box_halfwidth` for the
    default).  Whenever two means are too close, the later one is redrawn; the
    total number of redraws is capped by `max_resamples`.

    Raises:
        SeparationInfeasible: the cap was hit before all pairs were separated.
    """
    if n_subjects < 1 or d < 1:
        raise ValueError("n_subjects and d must be positive")
    rng = np.random.default_rng(rng_seed)
    if box is None:
        box = mean_box_halfwidth(n_subjects, d, separation)
    means = rng.uniform(-box, box, size=(n_subjects, d))
    resamples = 0
    while True:
        pairs = _close_pairs(means, separation)
        if len(pairs) == 0:
            break
        redo = np.unique(pairs[:, 1])
        resamples += len(redo)
        if resamples > max_resamples:
            raise SeparationInfeasible(
                f"{n_subjects} subjects in d={d} still overlapping after {max_resamples} resamples"
            )
        means[redo] = rng.uniform(-box, box, size=(len(redo), d))
    covs = rng.uniform(*COV_RANGE, size=(n_subjects, d))
    return [
        SubjectSpec(i, means[i], covs[i], sampling, alpha) for i in range(n_subjects)
    ]


class Restaurant:
    """Chinese-restaurant sampler over a Gaussian base measure.

    State persists across :meth:`draw` calls, so successive calls are
    successive draws from one Dirichlet-process realisation.
    """

    def __init__(self, spec: SubjectSpec):
        self.spec = spec
        self.atoms: list[np.ndarray] = []
        self.history: list[int] = []  # atom index of every draw so far

    @property
    def n_draws(self) -> int:
        return len(self.history)

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        alpha = self.spec.alpha
        std = np.sqrt(self.spec.covariance)
        picks = np.empty(n, dtype=np.int64)
        u = rng.random(n)
        for t in range(n):
            k = len(self.history)
            if u[t] * (alpha + k) < alpha:
                self.atoms.append(self.spec.mean + std * rng.standard_normal(self.spec.dim))
                atom = len(self.atoms) - 1
            else:
                # uniform over previous draws == proportional to multiplicity
                atom = self.history[int(rng.integers(k))]
            self.history.append(atom)
            picks[t] = atom
        return np.asarray(self.atoms)[picks]


def sample_subject(
    spec: SubjectSpec,
    n_items: int,
    rng: np.random.Generator,
    restaurant: Restaurant | None = None,
    first_record_id: int = 0,
) -> PointSet:
    """Draw `n_items` labelled points from one subject.

    In Dirichlet mode a fresh restaurant is opened unless one is passed in.
    """
    if n_items < 1:
        raise ValueError("n_items must be positive")
    if spec.sampling == "standard":
        x = spec.mean + np.sqrt(spec.covariance) * rng.standard_normal((n_items, spec.dim))
    else:
        if restaurant is None:
            restaurant = Restaurant(spec)
        elif restaurant.spec is not spec:
            raise ValueError("restaurant belongs to a different subject")
        x = restaurant.draw(n_items, rng)
    return PointSet(
        x,
        label(x),
        np.full(n_items, spec.subject_id),
        np.arange(first_record_id, first_record_id + n_items),
    )


def split_evenly(total: int, parts: int) -> list[int]:
    """Split `total` into `parts` near-equal counts, remainder to the front."""
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


class _SubjectSource:
    """Per-subject sampling streams with persistent restaurants."""

    def __init__(self, specs: dict[int, SubjectSpec], seed):
        self.specs = specs
        self.seed = seed
        self._rngs: dict[int, np.random.Generator] = {}
        self._restaurants: dict[int, Restaurant] = {}
        self.next_record = 0

    def draw(self, sid: int, n: int) -> PointSet:
        if sid not in self._rngs:
            self._rngs[sid] = np.random.default_rng([*self.seed, _STREAM_SAMPLE, sid])
        spec = self.specs[sid]
        rest = None
        if spec.sampling == "dirichlet":
            rest = self._restaurants.setdefault(sid, Restaurant(spec))
        pts = sample_subject(spec, n, self._rngs[sid], rest, self.next_record)
        self.next_record += n
        return pts


def _seed_words(seed) -> list[int]:
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


def build_federation(cfg, rng_seed=None) -> Federation:
    """Assemble a federation with ground-truth subject membership.

    `cfg` needs the attributes ``d, sampling, alpha, users, subjects_per_user,
    items_per_user, max_attack_samples, access_mode, test_size, mean_box`` (a
    :class:`subjectmia.config.FederationConfig` has them all).

    The candidate pool holds ``2 * users * subjects_per_user`` subjects, split
    in half.  Each user draws ``subjects_per_user`` distinct subjects from the
    member half, independently of other users, so users overlap.  Subjects that
    end up with data form the member set; an equal number of never-used
    subjects from the other half form the non-member set.
    """
    seed = _seed_words(cfg.seed if rng_seed is None else rng_seed)
    n_slots = cfg.users * cfg.subjects_per_user
    specs_list = generate_subjects(
        2 * n_slots,
        cfg.d,
        cfg.sampling,
        [*seed, _STREAM_SUBJECTS],
        alpha=cfg.alpha,
        box=cfg.mean_box,
    )
    specs = {s.subject_id: s for s in specs_list}

    rng = np.random.default_rng([*seed, _STREAM_ASSIGN])
    order = rng.permutation(2 * n_slots)
    candidates, outsiders = np.sort(order[:n_slots]), order[n_slots:]
    assignments = {}
    for u in range(cfg.users):
        chosen = rng.choice(candidates, size=cfg.subjects_per_user, replace=False)
        assignments[u] = tuple(int(s) for s in np.sort(chosen))
    members = sorted({s for subj in assignments.values() for s in subj})
    nonmembers = sorted(int(s) for s in outsiders[: len(members)])

    source = _SubjectSource(specs, seed)
    shards = []
    for u in range(cfg.users):
        subj = assignments[u]
        parts = [
            source.draw(sid, k)
            for sid, k in zip(subj, split_evenly(cfg.items_per_user, len(subj)))
            if k > 0
        ]
        shards.append(UserShard(u, PointSet.concat(parts)))

    attack_pool: dict[int, PointSet] = {}
    if cfg.access_mode == "item":
        pick = np.random.default_rng([*seed, _STREAM_ITEM_POOL])
        trained = PointSet.concat([s.points for s in shards])
        for sid in members:
            idx = np.flatnonzero(trained.subject_ids == sid)
            n = min(cfg.max_attack_samples, len(idx))
            attack_pool[sid] = trained[np.sort(pick.choice(idx, size=n, replace=False))]
    elif cfg.access_mode == "distribution":
        for sid in members:
            attack_pool[sid] = source.draw(sid, cfg.max_attack_samples)
    else:
        raise ValueError(f"unknown access mode {cfg.access_mode!r}")
    for sid in nonmembers:
        attack_pool[sid] = source.draw(sid, cfg.max_attack_samples)

    test_parts = [
        source.draw(sid, k)
        for sid, k in zip(members, split_evenly(cfg.test_size, len(members)))
        if k > 0
    ]
    return Federation(
        shards=shards,
        member_subjects=frozenset(members),
        nonmember_subjects=frozenset(nonmembers),
        specs=specs,
        attack_pool=attack_pool,
        test_set=PointSet.concat(test_parts),
        access_mode=cfg.access_mode,
        assignments=assignments,
    )


# -- persistence -----------------------------------------------------------

def _pack(prefix: str, ps: PointSet, out: dict) -> None:
    out[f"{prefix}/x"] = ps.x
    out[f"{prefix}/y"] = ps.y
    out[f"{prefix}/s"] = ps.subject_ids
    out[f"{prefix}/r"] = ps.record_ids


def _unpack(prefix: str, data) -> PointSet:
    return PointSet(data[f"{prefix}/x"], data[f"{prefix}/y"], data[f"{prefix}/s"], data[f"{prefix}/r"])


def save_federation(fed: Federation, path) -> Path:
    """Write a federation to an ``.npz`` archive; float arrays are stored bit-exact."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    ids = sorted(fed.specs)
    arrays["spec/ids"] = np.asarray(ids, dtype=np.int64)
    arrays["spec/mean"] = np.stack([fed.specs[i].mean for i in ids])
    arrays["spec/cov"] = np.stack([fed.specs[i].covariance for i in ids])
    arrays["spec/alpha"] = np.asarray([fed.specs[i].alpha for i in ids])
    for shard in fed.shards:
        _pack(f"shard/{shard.user_id}", shard.points, arrays)
    for sid, ps in fed.attack_pool.items():
        _pack(f"pool/{sid}", ps, arrays)
    _pack("test", fed.test_set, arrays)
    meta = {
        "version": FORMAT_VERSION,
        "sampling": [fed.specs[i].sampling for i in ids],
        "users": [s.user_id for s in fed.shards],
        "pool": sorted(fed.attack_pool),
        "members": sorted(fed.member_subjects),
        "nonmembers": sorted(fed.nonmember_subjects),
        "access_mode": fed.access_mode,
        "assignments": {str(k): list(v) for k, v in fed.assignments.items()},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_federation(path) -> Federation:
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported federation format {meta.get('version')!r}")
        ids = data["spec/ids"]
        specs = {
            int(i): SubjectSpec(int(i), data["spec/mean"][k], data["spec/cov"][k],
                                meta["sampling"][k], float(data["spec/alpha"][k]))
            for k, i in enumerate(ids)
        }
        shards = [UserShard(u, _unpack(f"shard/{u}", data)) for u in meta["users"]]
        pool = {sid: _unpack(f"pool/{sid}", data) for sid in meta["pool"]}
        test = _unpack("test", data)
    return Federation(
        shards=shards,
        member_subjects=frozenset(meta["members"]),
        nonmember_subjects=frozenset(meta["nonmembers"]),
        specs=specs,
        attack_pool=pool,
        test_set=test,
        access_mode=meta["access_mode"],
        assignments={int(k): tuple(v) for k, v in meta["assignments"].items()},
    )

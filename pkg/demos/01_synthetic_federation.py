"""Synthetic subjects, XOR labels and a small federation."""

# %%
import numpy as np

from subjectmia.config import FederationConfig
from subjectmia.synthgen import SubjectSpec, build_federation, generate_subjects, label, sample_subject

# %% labels are the parity of the sign bits
print(label(np.array([0.3, -0.2])), label(np.array([-1.0, -1.0, -1.0])))

# %% subjects: separated Gaussian means, small diagonal covariances
specs = generate_subjects(20, 2, rng_seed=0)
means = np.stack([s.mean for s in specs])
gaps = np.linalg.norm(means[:, None] - means[None], axis=-1)
print("closest pair of means:", gaps[np.triu_indices(20, 1)].min().round(3))

# %% Dirichlet-process sampling repeats points; standard sampling does not
spec = SubjectSpec(0, np.zeros(3), np.full(3, 0.01), "dirichlet", 1.0)
pts = sample_subject(spec, 1000, np.random.default_rng(0))
print("distinct points among 1000 Dirichlet draws:", len(np.unique(pts.x, axis=0)))

# %% a federation: users hold overlapping member subjects
cfg = FederationConfig(d=50, users=4, subjects_per_user=5, items_per_user=500, custom=True)
fed = build_federation(cfg)
for shard in fed.shards:
    print(f"user {shard.user_id}: {len(shard)} points from subjects {sorted(shard.subject_ids_present)}")
print(len(fed.member_subjects), "members,", len(fed.nonmember_subjects), "non-members")

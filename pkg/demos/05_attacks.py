"""Loss-Threshold and Loss-Across-Rounds attacks on a trained federation."""

# %%
from subjectmia import attacks, harness
from subjectmia.config import FederationConfig

cfg = FederationConfig(d=250, sampling="dirichlet", users=5, subjects_per_user=5, items_per_user=500,
                       hidden=(32, 8), rounds=10, batch_size=64, test_size=1000,
                       validation_subject_count=4, custom=True)
fed, snapshots = harness.train(cfg)
reports = harness.attack_federation(cfg, fed, snapshots)

# %% tuned thresholds and test metrics
for kind, rep in reports.items():
    m = rep.metrics
    print(f"{kind}: {rep.thresholds}")
    print(f"  F1 {m.f1:.3f}  precision {m.precision:.3f}  recall {m.recall:.3f}")

# %% the attacks only need losses: any object with `n_snapshots` and `losses()` works
oracle = attacks.SnapshotOracle(snapshots)
sid = next(iter(fed.member_subjects))
trace = attacks.collect_losses(oracle, {sid: fed.attack_pool[sid]})[sid]
print("member", sid, "summed loss by round:", trace.losses.sum(axis=1).round(2))

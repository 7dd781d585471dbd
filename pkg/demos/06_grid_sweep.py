"""A small resumable sweep and its aggregate CSV."""

# %%
import csv
import tempfile

from subjectmia import grid
from subjectmia.config import FederationConfig

base = FederationConfig(users=4, subjects_per_user=5, items_per_user=500, hidden=(8,), rounds=5,
                        batch_size=64, test_size=500, validation_subject_count=3, custom=True)
values = {"d": [2, 50], "sampling": ["standard", "dirichlet"]}
print(len(grid.expand_grid(grid.TABLE_GRID, FederationConfig())), "configs in the full table")

# %% run, then rerun: finished configs are skipped
with tempfile.TemporaryDirectory() as out:
    first = grid.run_grid(values, base, out)
    second = grid.run_grid(values, base, out)
    print(f"first pass ran {len(first.executed)}, second pass ran {len(second.executed)}")
    with open(first.csv_path) as fh:
        for row in csv.DictReader(fh):
            print(row["d"], row["sampling"], "LT F1", row["lt_f1"], "LAR F1", row["lar_f1"])

"""Item-, subject- and user-level DP, and the reported epsilon."""

# %%
import math

import numpy as np

from subjectmia import dpcore, nnet
from subjectmia.dpcore import DpConfig
from subjectmia.synthgen import PointSet

rng = np.random.default_rng(0)
params = nnet.init_params(nnet.MlpSpec(4, (6,)), rng)
# one subject contributes 8 of the 10 points in this batch
batch = PointSet(rng.normal(size=(10, 4)), rng.integers(0, 2, 10), [7] * 8 + [1, 2], np.arange(10))

# %% without noise: item DP clips every example, subject DP clips every subject's average
C = 0.05
item = dpcore.item_dp_batch_gradient(params, batch, DpConfig("item", C, 0.0), None)
subject = dpcore.subject_dp_batch_gradient(params, batch, DpConfig("subject", C, 0.0), None)
plain = nnet.batch_gradient(params, batch.x, batch.y)
print("norms  plain %.4f  item %.4f  subject %.4f" % tuple(map(np.linalg.norm, (plain, item, subject))))

# %% user DP acts on the whole model update
print(dpcore.user_dp_update(np.array([3.0, 4.0]), DpConfig("user", 1.0, 0.0), None))

# %% epsilon for the synthetic DP runs: sigma 1.8346, batch 20 of 10,000, 20 rounds
dp = DpConfig("subject", 1.0, 1.8346, 1e-5)
steps = 20 * math.ceil(10_000 / 20)
print("epsilon:", round(dpcore.report_epsilon(dp, 20 / 10_000, steps), 3))

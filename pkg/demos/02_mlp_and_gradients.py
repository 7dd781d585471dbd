"""The MLP: forward pass, loss, backprop and a gradient check."""

# %%
import numpy as np

from subjectmia import nnet

rng = np.random.default_rng(0)
spec = nnet.MlpSpec(5, (8, 4))
params = nnet.init_params(spec, rng)
print(spec.widths, spec.n_params, "parameters")

# %% one example
x, y = rng.normal(size=5), 1
print("p(y=1) =", nnet.forward(params, x), " loss =", nnet.per_example_loss(params, x, y))

# %% backprop against central differences
g = nnet.per_example_gradient(params, x, y)
fd = np.zeros_like(g)
for k in range(len(g)):
    up, down = params.copy(), params.copy()
    up.flat[k] += 1e-5
    down.flat[k] -= 1e-5
    fd[k] = (nnet.per_example_loss(up, x, y) - nnet.per_example_loss(down, x, y)) / 2e-5
print("max abs difference:", np.abs(g - fd).max())

# %% a few Adam steps on a toy batch
xb, yb = rng.normal(size=(64, 5)), rng.integers(0, 2, 64)
opt = nnet.OptimizerState("adam", 0.01).fresh(spec.n_params)
for step in range(200):
    params, opt = nnet.optimizer_step(opt, params, nnet.batch_gradient(params, xb, yb))
print("mean loss after 200 steps:", nnet.per_example_loss(params, xb, yb).mean().round(4))

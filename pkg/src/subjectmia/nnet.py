"""Small ReLU MLP with a single logit, written against numpy.

Parameters live in one flat float64 vector; layers are views into it.  All
gradient routines work on that flat layout so that DP mechanisms and the
optimizers can treat a model as a plain vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

CHECKPOINT_VERSION = 1
MAX_HIDDEN_LAYERS = 8


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer widths must be positive")
        if len(self.hidden) > MAX_HIDDEN_LAYERS:
            raise ValueError(f"at most {MAX_HIDDEN_LAYERS} hidden layers")

    @property
    def widths(self) -> tuple:
        return (self.input_dim, *self.hidden, 1)

    @property
    def n_params(self) -> int:
        w = self.widths
        return sum((w[i] + 1) * w[i + 1] for i in range(len(w) - 1))


@dataclass
class ModelParams:
    spec: MlpSpec
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.spec.n_params,):
            raise DimensionMismatch(
                f"expected {self.spec.n_params} parameters, got {self.flat.shape}"
            )

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(weight, bias) views, weight shaped (fan_in, fan_out)."""
        out, pos = [], 0
        w = self.spec.widths
        for fan_in, fan_out in zip(w[:-1], w[1:]):
            W = self.flat[pos: pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = self.flat[pos: pos + fan_out]
            pos += fan_out
            out.append((W, b))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, self.flat.copy())


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    parts = []
    w = spec.widths
    for fan_in, fan_out in zip(w[:-1], w[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return ModelParams(spec, np.concatenate(parts))


def zeros(spec: MlpSpec) -> ModelParams:
    return ModelParams(spec, np.zeros(spec.n_params))


def _as_batch(params: ModelParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise DimensionMismatch(
            f"model expects input_dim={params.spec.input_dim}, got shape {np.shape(x)}"
        )
    return x, single


def logits(params: ModelParams, x) -> np.ndarray:
    h, single = _as_batch(params, x)
    layers = params.layers()
    for W, b in layers[:-1]:
        h = np.maximum(h @ W + b, 0.0)
    W, b = layers[-1]
    z = (h @ W + b)[:, 0]
    return z[0] if single else z


sigmoid = expit


def forward(params: ModelParams, x):
    """Probability of label 1 for one vector or a batch of row vectors."""
    return sigmoid(logits(params, x))


def bce_with_logits(z, y):
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))


def per_example_loss(params: ModelParams, x, y):
    """Binary cross-entropy of each example; scalar for a single vector."""
    return bce_with_logits(logits(params, x), y)


@dataclass
class BackpropTerms:
    """Per-layer inputs and output-side deltas of a batch.

    The gradient of example ``i`` for layer ``l`` is ``outer(inputs[l][i],
    deltas[l][i])`` for the weight and ``deltas[l][i]`` for the bias.  Deltas
    are linear in the loss derivative, which lets weighted sums of per-example
    gradients be formed without materialising them.
    """

    inputs: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    losses: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.inputs[0])


def backprop_terms(params: ModelParams, x, y) -> BackpropTerms:
    h, _ = _as_batch(params, x)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    layers = params.layers()
    inputs, pre = [], []
    for W, b in layers[:-1]:
        inputs.append(h)
        a = h @ W + b
        pre.append(a)
        h = np.maximum(a, 0.0)
    inputs.append(h)
    W, b = layers[-1]
    z = (h @ W + b)[:, 0]
    delta = (sigmoid(z) - y)[:, None]
    deltas = [delta]
    for l in range(len(layers) - 1, 0, -1):
        delta = (delta @ layers[l][0].T) * (pre[l - 1] > 0)
        deltas.append(delta)
    deltas.reverse()
    return BackpropTerms(inputs, deltas, bce_with_logits(z, y))


def gradient_from_terms(terms: BackpropTerms, weights=None) -> np.ndarray:
    """Flat ``sum_i weights[i] * grad_i`` (plain sum when weights is None)."""
    parts = []
    for a, d in zip(terms.inputs, terms.deltas):
        if weights is not None:
            d = d * weights[:, None]
        parts.append((a.T @ d).ravel())
        parts.append(d.sum(axis=0))
    return np.concatenate(parts)


def group_gradient_norms(terms: BackpropTerms, group_index: np.ndarray, n_groups: int) -> np.ndarray:
    """L2 norm of each group's *summed* per-example gradient.

    Uses ``||sum_i g_i||^2 = sum_ij sum_l (a_i.a_j + 1)(d_i.d_j)`` so no
    per-example gradient is ever materialised.
    """
    n = terms.n
    kernel = np.zeros((n, n))
    for a, d in zip(terms.inputs, terms.deltas):
        kernel += (a @ a.T + 1.0) * (d @ d.T)
    onehot = np.zeros((n_groups, n))
    onehot[group_index, np.arange(n)] = 1.0
    sq = np.einsum("gi,ij,gj->g", onehot, kernel, onehot)
    return np.sqrt(np.maximum(sq, 0.0))


def per_example_gradients(params: ModelParams, x, y) -> np.ndarray:
    """Matrix of flat per-example gradients, one row per example."""
    terms = backprop_terms(params, x, y)
    parts = []
    for a, d in zip(terms.inputs, terms.deltas):
        parts.append(np.einsum("ni,no->nio", a, d).reshape(len(a), -1))
        parts.append(d)
    return np.concatenate(parts, axis=1)


def per_example_gradient(params: ModelParams, x, y) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch("per_example_gradient takes a single vector")
    return per_example_gradients(params, x[None, :], [y])[0]


def batch_gradient(params: ModelParams, x, y) -> np.ndarray:
    """Mean gradient over a mini-batch."""
    terms = backprop_terms(params, x, y)
    return gradient_from_terms(terms) / terms.n


# -- optimizers ------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")

    def fresh(self, n_params: int) -> "OptimizerState":
        """Same hyperparameters, zeroed step counter and moments."""
        if self.kind == "adam":
            return replace(self, step_count=0, m=np.zeros(n_params), v=np.zeros(n_params))
        return replace(self, step_count=0, m=None, v=None)


def optimizer_step(state: OptimizerState, params: ModelParams, grad) -> tuple[ModelParams, OptimizerState]:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.flat.shape:
        raise DimensionMismatch("gradient and parameters differ in length")
    t = state.step_count + 1
    if state.kind == "sgd":
        return ModelParams(params.spec, params.flat - state.learning_rate * grad), replace(state, step_count=t)
    m = np.zeros_like(grad) if state.m is None else state.m
    v = np.zeros_like(grad) if state.v is None else state.v
    m = state.beta1 * m + (1.0 - state.beta1) * grad
    v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    flat = params.flat - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return ModelParams(params.spec, flat), replace(state, step_count=t, m=m, v=v)


# -- checkpoints -----------------------------------------------------------

def save_params(params: ModelParams, path) -> Path:
    path = Path(path)
    header = {"version": CHECKPOINT_VERSION, "input_dim": params.spec.input_dim,
              "hidden": list(params.spec.hidden)}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
                 flat=params.flat)
    return path


def load_params(path) -> ModelParams:
    with np.load(Path(path)) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
        return ModelParams(MlpSpec(header["input_dim"], tuple(header["hidden"])), data["flat"].copy())

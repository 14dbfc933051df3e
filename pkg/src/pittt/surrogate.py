"""Feed-forward surrogate: operating condition -> unknown vector.

Layers are ``tanh(W h + b)`` on hidden layers and affine on the output. The
network works in normalized coordinates; outputs are mapped back with
``u = output_mean + output_scale * y``. The final affine layer is the
adaptable block; everything below it is frozen at test time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import DimensionError, InvalidDataError, NumericalError
from .grid import GridCase, OperatingCondition, extract_unknowns

N_CHANNELS = 6


@dataclass
class SurrogateParams:
    weights: List[np.ndarray]  # W[k] has shape (out, in)
    biases: List[np.ndarray]
    input_mean: np.ndarray
    input_scale: np.ndarray
    output_mean: np.ndarray
    output_scale: np.ndarray
    adapt_boundary: Optional[int] = None
    case_name: str = ""
    optimizer: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.adapt_boundary is None:
            self.adapt_boundary = len(self.weights) - 1
        if self.adapt_boundary != len(self.weights) - 1:
            raise DimensionError("adapt_boundary must address the final layer")
        for k in range(1, len(self.weights)):
            if self.weights[k].shape[1] != self.weights[k - 1].shape[0]:
                raise DimensionError(f"layer {k} does not chain to layer {k - 1}")
        if len(self.input_mean) != self.input_dim or len(self.output_mean) != self.output_dim:
            raise DimensionError("normalization stats do not match layer dimensions")

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def output_dim(self):
        return self.weights[-1].shape[0]

    @property
    def n_adapt(self):
        return self.weights[-1].size + self.biases[-1].size

    def adapt_vector(self):
        return np.concatenate([self.weights[-1].ravel(), self.biases[-1]])

    def frozen_vector(self):
        parts = [a.ravel() for W, b in zip(self.weights[:-1], self.biases[:-1]) for a in (W, b)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def split_adapt(self, phi):
        """View a flat adapt-sized vector as (dW, db) for the final layer."""
        W = self.weights[-1]
        return phi[:W.size].reshape(W.shape), phi[W.size:]

    def check_case(self, case: GridCase):
        if self.input_dim != N_CHANNELS * case.n or self.output_dim != case.n_unknowns:
            raise DimensionError(
                f"model expects {self.input_dim // N_CHANNELS} buses / {self.output_dim} unknowns, "
                f"case {case.name or ''} has {case.n} buses / {case.n_unknowns} unknowns")


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=float)
        sd = X.std(axis=0)
        return cls(mean=X.mean(axis=0), scale=np.where(sd > 1e-12, sd, 1.0))

    @classmethod
    def identity(cls, dim):
        return cls(mean=np.zeros(dim), scale=np.ones(dim))


def raw_features(condition: OperatingCondition, case: GridCase) -> np.ndarray:
    """Per-bus channels (p_spec, q_spec, v_set, is_PQ, is_PV, is_slack), bus-major."""
    if condition.n != case.n:
        raise DimensionError(f"condition has {condition.n} buses, case has {case.n}")
    onehot = np.zeros((case.n, 3))
    onehot[np.arange(case.n), case.kinds - 1] = 1.0
    return np.column_stack([condition.p_spec, condition.q_spec, condition.v_set, onehot]).ravel()


def encode_input(condition: OperatingCondition, case: GridCase, stats: Standardizer) -> np.ndarray:
    x = raw_features(condition, case)
    if len(stats.mean) != len(x):
        raise DimensionError(f"feature stats have {len(stats.mean)} entries, features {len(x)}")
    return (x - stats.mean) / stats.scale


def input_stats(params: SurrogateParams) -> Standardizer:
    return Standardizer(params.input_mean, params.input_scale)


@dataclass
class ForwardCache:
    params: SurrogateParams
    activations: list  # input, then each hidden activation
    y: np.ndarray      # normalized output


def forward(params: SurrogateParams, features, phi=None):
    """Evaluate the network on one feature vector or a batch (rows).

    ``phi`` optionally perturbs the final layer: ``[dW.ravel(), db]``.
    Returns ``(u, cache)`` with ``u`` de-normalized.
    """
    x = np.asarray(features, dtype=float)
    if x.shape[-1] != params.input_dim:
        raise DimensionError(f"features have {x.shape[-1]} entries, model expects {params.input_dim}")
    acts = [x]
    h = x
    for W, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.tanh(h @ W.T + b)
        acts.append(h)
    W, b = params.weights[-1], params.biases[-1]
    if phi is not None:
        dW, db = params.split_adapt(np.asarray(phi, dtype=float))
        W, b = W + dW, b + db
    y = h @ W.T + b
    return params.output_mean + params.output_scale * y, ForwardCache(params, acts, y)


def _check_cache(params, cache, dL_du):
    if cache.params is not params:
        raise ValueError("forward cache was produced by different parameters")
    if np.shape(dL_du) != np.shape(cache.y):
        raise DimensionError(f"output gradient shape {np.shape(dL_du)} does not match {np.shape(cache.y)}")


def backward_output_to_adapt(params: SurrogateParams, cache: ForwardCache, dL_du) -> np.ndarray:
    """Gradient w.r.t. the final layer as ``[dW.ravel(), db]`` (single sample)."""
    _check_cache(params, cache, dL_du)
    gy = np.asarray(dL_du) * params.output_scale
    h = cache.activations[-1]
    return np.concatenate([np.outer(gy, h).ravel(), gy])


def backward_full(params: SurrogateParams, cache: ForwardCache, dL_du):
    """Reverse-mode pass; returns ``[(dW, db), ...]`` per layer, summed over a batch."""
    _check_cache(params, cache, dL_du)
    g = np.asarray(dL_du) * params.output_scale
    grads = []
    acts = cache.activations
    for k in range(len(params.weights) - 1, -1, -1):
        h = acts[k]
        if g.ndim == 1:
            grads.append((np.outer(g, h), g.copy()))
        else:
            grads.append((g.T @ h, g.sum(axis=0)))
        if k > 0:
            g = (g @ params.weights[k]) * (1.0 - acts[k] ** 2)
    return grads[::-1]


def default_hidden(case: GridCase):
    w = max(64, 4 * case.n)
    return (w, w)


def init_params(input_dim, output_dim, hidden, rng, in_stats=None, out_stats=None, case_name=""):
    dims = [input_dim, *hidden, output_dim]
    weights, biases = [], []
    for k in range(len(dims) - 1):
        std = np.sqrt(2.0 / (dims[k] + dims[k + 1]))
        weights.append(rng.normal(0.0, std, size=(dims[k + 1], dims[k])))
        biases.append(np.zeros(dims[k + 1]))
    in_stats = in_stats or Standardizer.identity(input_dim)
    out_stats = out_stats or Standardizer.identity(output_dim)
    return SurrogateParams(weights, biases, in_stats.mean, in_stats.scale, out_stats.mean, out_stats.scale,
                           case_name=case_name)


@dataclass(frozen=True)
class TrainConfig:
    hidden: Optional[tuple] = None  # None -> default_hidden(case)
    optimizer: str = "momentum"
    lr: float = 0.05
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 200
    lr_decay: float = 0.99  # per epoch
    seed: int = 0


def mse_loss(params, X, U):
    """Mean squared error in normalized output space, and its gradient w.r.t. ``u``."""
    u, cache = forward(params, X)
    r = (u - U) / params.output_scale
    loss = float(np.mean(r * r))
    return loss, 2.0 * r / params.output_scale / r.size, cache


def train(records: Sequence, case: GridCase, config: TrainConfig = TrainConfig()):
    """Fit a surrogate on the train split by mini-batch first-order optimization.

    Returns ``(params, curve)`` where ``curve`` is the full-batch training MSE
    (normalized targets) after each epoch, preceded by the initial value.
    """
    train_recs = [r for r in records if getattr(r, "split", "train") == "train"]
    if not train_recs:
        raise InvalidDataError("training split is empty")
    if config.optimizer not in ("momentum", "adam"):
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    Xraw = np.array([raw_features(r.condition, case) for r in train_recs])
    U = np.array([extract_unknowns(case, r.label) for r in train_recs])
    in_stats, out_stats = Standardizer.fit(Xraw), Standardizer.fit(U)
    X = (Xraw - in_stats.mean) / in_stats.scale

    hidden = tuple(config.hidden) if config.hidden is not None else default_hidden(case)
    rng = np.random.default_rng(config.seed)
    params = init_params(X.shape[1], U.shape[1], hidden, rng, in_stats, out_stats, case_name=case.name)
    meta = {k: v for k, v in vars(config).items()}
    meta["hidden"] = list(hidden)
    params.optimizer = meta

    slots = [(np.zeros_like(W), np.zeros_like(b)) for W, b in zip(params.weights, params.biases)]
    slots2 = [(np.zeros_like(W), np.zeros_like(b)) for W, b in zip(params.weights, params.biases)]
    step = 0
    curve = [mse_loss(params, X, U)[0]]
    n = len(X)
    lr = config.lr
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, g_u, cache = mse_loss(params, X[idx], U[idx])
            grads = backward_full(params, cache, g_u)
            step += 1
            for k, ((gW, gb), (mW, mb), (vW, vb)) in enumerate(zip(grads, slots, slots2)):
                if config.optimizer == "momentum":
                    mW *= config.momentum
                    mW += gW
                    mb *= config.momentum
                    mb += gb
                    params.weights[k] -= lr * mW
                    params.biases[k] -= lr * mb
                else:
                    for m_, v_, g_, p_ in ((mW, vW, gW, params.weights[k]), (mb, vb, gb, params.biases[k])):
                        m_ *= config.beta1
                        m_ += (1 - config.beta1) * g_
                        v_ *= config.beta2
                        v_ += (1 - config.beta2) * g_ * g_
                        mhat = m_ / (1 - config.beta1 ** step)
                        vhat = v_ / (1 - config.beta2 ** step)
                        p_ -= lr * mhat / (np.sqrt(vhat) + config.adam_eps)
        lr *= config.lr_decay
        full = mse_loss(params, X, U)[0]
        if not np.isfinite(full):
            raise NumericalError(f"training loss became non-finite at epoch {epoch + 1}")
        curve.append(full)
    return params, curve


def predict_unknowns(params: SurrogateParams, condition, case):
    params.check_case(case)
    return forward(params, encode_input(condition, case, input_stats(params)))[0]

"""Multilayer-perceptron Q-functions with analytic gradients.

Weights are stored ``(fan_in, fan_out)`` so a batch ``X`` of shape
``(N, fan_in)`` maps to ``X @ W + b``. Hidden layers use ReLU or tanh; the
output activation is linear for Q-heads and may be set to ReLU/tanh when an
MLP is used as a shared feature trunk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import SeededRng, StateVector, TransitionBatch

FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "tanh", "linear")


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class MLPParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[str, ...]  # one per hidden layer
    out_activation: str = "linear"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        if len(self.activations) != len(self.weights) - 1:
            raise ValueError("need one activation per hidden layer")
        for a in (*self.activations, self.out_activation):
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {i}: weight {W.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != W.shape[0]:
                raise ValueError(f"layer {i} input {W.shape[0]} != previous output {self.weights[i - 1].shape[1]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [a.shape for a in self.arrays()]

    def arrays(self) -> list[np.ndarray]:
        """Parameters in canonical order ``W0, b0, W1, b1, ...`` (views)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "MLPParams":
        return MLPParams(
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            tuple(self.activations),
            self.out_activation,
        )

    def zeros_like(self) -> "MLPParams":
        return MLPParams(
            [np.zeros_like(W) for W in self.weights],
            [np.zeros_like(b) for b in self.biases],
            tuple(self.activations),
            self.out_activation,
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_mlp(
    sizes: Sequence[int],
    rng: SeededRng,
    activation: str = "relu",
    out_activation: str = "linear",
) -> MLPParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=(fan_out,)))
    return MLPParams(weights, biases, (activation,) * (len(sizes) - 2), out_activation)


def _as_input(s) -> np.ndarray:
    if isinstance(s, StateVector):
        return s.values
    return np.asarray(s, dtype=np.float64)


def forward(params: MLPParams, s) -> np.ndarray:
    """Q-values for one state (``(A,)``) or a batch (``(N, A)``)."""
    x = _as_input(s)
    if x.shape[-1] != params.in_dim:
        raise ValueError(f"input dimension {x.shape[-1]} != network input {params.in_dim}")
    h = x
    n = len(params.weights)
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = _act(params.activations[i] if i < n - 1 else params.out_activation, h @ W + b)
    return h


def forward_cache(params: MLPParams, X: np.ndarray):
    """Batch forward keeping the per-layer inputs/pre-activations for backprop."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.in_dim:
        raise ValueError(f"input dimension {X.shape[1]} != network input {params.in_dim}")
    inputs, pre, post = [], [], []
    h = X
    n = len(params.weights)
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ W + b
        h = _act(params.activations[i] if i < n - 1 else params.out_activation, z)
        pre.append(z)
        post.append(h)
    return h, (inputs, pre, post)


def backward(params: MLPParams, cache, dout: np.ndarray):
    """Gradients of a scalar loss given ``dout = dLoss/dOutput``.

    Returns ``(grads, dX)`` where ``grads`` is shaped like ``params``.
    """
    inputs, pre, post = cache
    grads = params.zeros_like()
    n = len(params.weights)
    d = dout
    for i in range(n - 1, -1, -1):
        name = params.activations[i] if i < n - 1 else params.out_activation
        d = d * _act_grad(name, pre[i], post[i])
        grads.weights[i] = inputs[i].T @ d
        grads.biases[i] = d.sum(axis=0)
        d = d @ params.weights[i].T
    return grads, d


# ---------------------------------------------------------------------------
# DQN pieces
# ---------------------------------------------------------------------------


class NonFiniteLoss(FloatingPointError):
    def __init__(self, msg, index=None, objective=None):
        super().__init__(msg)
        self.index = index
        self.objective = objective


@dataclass
class QNetwork:
    eval: MLPParams
    target: MLPParams
    sync_period: int = 200
    steps_since_sync: int = 0

    def __post_init__(self):
        if self.eval.shapes != self.target.shapes:
            raise ValueError("eval and target networks must share shapes")
        if self.sync_period < 1:
            raise ValueError("sync_period must be >= 1")

    @classmethod
    def create(cls, sizes, rng: SeededRng, activation="relu", sync_period=200) -> "QNetwork":
        p = init_mlp(sizes, rng, activation)
        return cls(p, p.copy(), sync_period)


def td_target(batch, objective: str, target, gamma: float, features: np.ndarray | None = None) -> np.ndarray:
    """``y = r`` for terminal transitions, else ``r + gamma * max_a' Q_T(s', a')``.

    ``target`` is an ``MLPParams`` or any callable mapping a batch of inputs
    to Q-rows. ``features`` overrides the next-state inputs (used when the
    head sits on a shared trunk).
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    b = TransitionBatch.stack(batch)
    r = b.rewards[objective]
    X = b.next_states if features is None else features
    q_next = forward(target, X) if isinstance(target, MLPParams) else target(X)
    best = q_next.max(axis=1)
    return np.where(b.terminals, r, r + gamma * best)


def td_loss_grad(params: MLPParams, X: np.ndarray, actions: np.ndarray, targets: np.ndarray):
    """Mean squared TD error on the taken actions, its gradient and dLoss/dX."""
    q, cache = forward_cache(params, X)
    n = q.shape[0]
    rows = np.arange(n)
    resid = q[rows, actions] - targets
    bad = ~np.isfinite(resid)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NonFiniteLoss(f"non-finite TD error at batch index {i}", index=i)
    loss = float(np.mean(resid * resid))
    dout = np.zeros_like(q)
    dout[rows, actions] = 2.0 * resid / n
    grads, dX = backward(params, cache, dout)
    return loss, grads, dX


def loss_and_grad(net: QNetwork | MLPParams, batch, targets, objective: str | None = None):
    """Loss and eval-parameter gradients; targets are treated as constants."""
    params = net.eval if isinstance(net, QNetwork) else net
    b = TransitionBatch.stack(batch)
    try:
        loss, grads, _ = td_loss_grad(params, b.states, b.actions, np.asarray(targets, dtype=np.float64))
    except NonFiniteLoss as exc:
        exc.objective = objective
        raise
    return loss, grads


class SGD:
    def __init__(self, lr: float = 1e-3):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        self.lr = lr

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params, grads) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")


def apply_update(net: QNetwork | MLPParams, grads: MLPParams, lr: float) -> None:
    """Plain SGD step on the evaluation parameters; the target is untouched."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    params = net.eval if isinstance(net, QNetwork) else net
    SGD(lr).step(params.arrays(), grads.arrays())


def maybe_sync_target(net: QNetwork) -> bool:
    """Advance the step counter; hard-copy eval into target every ``sync_period`` calls."""
    net.steps_since_sync += 1
    if net.steps_since_sync >= net.sync_period:
        net.target = net.eval.copy()
        net.steps_since_sync = 0
        return True
    return False


def greedy_action(q_row: np.ndarray) -> int:
    """Argmax with ties resolved to the lowest index."""
    return int(np.argmax(q_row))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def params_to_arrays(params: MLPParams, prefix: str = "") -> dict[str, np.ndarray]:
    out = {
        f"{prefix}meta": np.array(
            json.dumps(
                {
                    "activations": list(params.activations),
                    "out_activation": params.out_activation,
                    "shapes": [list(s) for s in params.shapes],
                }
            )
        )
    }
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        out[f"{prefix}W{i}"] = W
        out[f"{prefix}b{i}"] = b
    return out


def params_from_arrays(data, prefix: str = "", expected_shapes=None) -> MLPParams:
    meta = json.loads(str(data[f"{prefix}meta"]))
    n = len(meta["shapes"]) // 2
    weights = [np.array(data[f"{prefix}W{i}"], dtype=np.float64) for i in range(n)]
    biases = [np.array(data[f"{prefix}b{i}"], dtype=np.float64) for i in range(n)]
    params = MLPParams(weights, biases, tuple(meta["activations"]), meta["out_activation"])
    if [list(s) for s in params.shapes] != meta["shapes"]:
        raise ValueError(f"{prefix or 'checkpoint'}: stored arrays disagree with recorded shapes")
    if expected_shapes is not None and [tuple(s) for s in expected_shapes] != params.shapes:
        raise ValueError(
            f"{prefix or 'checkpoint'}: shape mismatch, expected {list(expected_shapes)} got {params.shapes}"
        )
    return params


def save_params(path, params: MLPParams) -> None:
    np.savez(path, format_version=np.array(FORMAT_VERSION), **params_to_arrays(params))


def load_params(path, expected_shapes=None) -> MLPParams:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        return params_from_arrays(data, "", expected_shapes)

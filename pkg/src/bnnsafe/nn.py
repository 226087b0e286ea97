"""Dense ReLU multilayer perceptrons: inference, reverse-mode gradients, Adam.

Hidden layers use ReLU, the last layer is affine. All arrays are float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "MlpNetwork",
    "TrainConfig",
    "TrainingDiverged",
    "Adam",
    "forward",
    "backprop",
    "gradient",
    "train",
    "logistic_loss",
    "squared_loss",
]


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes NaN or infinite."""


@dataclass(frozen=True)
class MlpNetwork:
    """Feed-forward network ``l_k o ... o l_1`` with ReLU hidden layers.

    ``weights[k]`` has shape ``(out_k, in_k)`` and ``biases[k]`` shape ``(out_k,)``.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias vector per weight matrix and at least one layer")
        ws, bs = [], []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.array(w, dtype=np.float64, ndmin=2)
            b = np.array(b, dtype=np.float64).reshape(-1)
            if w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {k}: weight rows {w.shape[0]} != bias length {b.shape[0]}")
            if k > 0 and w.shape[1] != ws[-1].shape[0]:
                raise ValueError(
                    f"layer {k}: expects {w.shape[1]} inputs but layer {k - 1} emits {ws[-1].shape[0]}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k}: non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
            ws.append(w)
            bs.append(b)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @classmethod
    def random(cls, sizes: Sequence[int], rng: np.random.Generator, scale: float | None = None):
        """He-style random initialisation for layer sizes ``[in, h1, ..., out]``."""
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            s = np.sqrt(2.0 / fan_in) if scale is None else scale
            ws.append(rng.normal(0.0, s, size=(fan_out, fan_in)))
            bs.append(rng.normal(0.0, 0.1 if scale is None else scale, size=fan_out))
        return cls(tuple(ws), tuple(bs))

    @classmethod
    def zeros(cls, sizes: Sequence[int]):
        ws = [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
        bs = [np.zeros(o) for o in sizes[1:]]
        return cls(tuple(ws), tuple(bs))

    @classmethod
    def constant(cls, sizes: Sequence[int], value: float):
        """Network with all weights zero whose output is ``value`` everywhere."""
        net = cls.zeros(sizes)
        bs = list(net.biases)
        bs[-1] = np.full(sizes[-1], float(value))
        return cls(net.weights, tuple(bs))

    def flatten(self) -> np.ndarray:
        """Layer-major parameter vector: weights row-major, then bias."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def with_params(self, flat: np.ndarray) -> "MlpNetwork":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got {flat.shape}")
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(flat[pos:pos + w.size].reshape(w.shape))
            pos += w.size
            bs.append(flat[pos:pos + b.size])
            pos += b.size
        return MlpNetwork(tuple(ws), tuple(bs))

    def __call__(self, x):
        return forward(self, x)

    def to_json(self) -> dict:
        return {
            "layers": [
                {
                    "rows": int(w.shape[0]),
                    "cols": int(w.shape[1]),
                    "weights": [float(v) for v in w.ravel()],
                    "bias": [float(v) for v in b],
                }
                for w, b in zip(self.weights, self.biases)
            ]
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MlpNetwork":
        ws, bs = [], []
        for k, layer in enumerate(obj["layers"]):
            rows, cols = int(layer["rows"]), int(layer["cols"])
            data = np.asarray(layer["weights"], dtype=np.float64)
            if data.size != rows * cols:
                raise ValueError(f"layer {k}: {data.size} weights for a {rows}x{cols} matrix")
            ws.append(data.reshape(rows, cols))
            bs.append(np.asarray(layer["bias"], dtype=np.float64))
        return cls(tuple(ws), tuple(bs))

    def dumps(self) -> str:
        # json emits repr() of floats, which round-trips float64 exactly
        return json.dumps(self.to_json())

    @classmethod
    def loads(cls, text: str) -> "MlpNetwork":
        return cls.from_json(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, MlpNetwork):
            return NotImplemented
        if self.layer_sizes != other.layer_sizes:
            return False
        return bool(np.array_equal(self.flatten(), other.flatten()))

    __hash__ = None


def forward(net: MlpNetwork, x) -> np.ndarray:
    """Evaluate ``net`` on one input vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[-1] != net.input_dim:
        raise ValueError(f"layer 0: expected input of size {net.input_dim}, got {h.shape[-1]}")
    last = net.num_layers - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h[0] if single else h


def _forward_cache(net: MlpNetwork, x: np.ndarray):
    pre, acts = [], [x]
    h = x
    last = net.num_layers - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if k < last else z
        acts.append(h)
    return pre, acts


def backprop(net: MlpNetwork, inputs: np.ndarray, grad_outputs: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product: ``sum_n grad_outputs[n] . d net(inputs[n]) / d params``.

    Returns the flat gradient in :meth:`MlpNetwork.flatten` order. The ReLU
    derivative at exactly zero is taken as zero.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    pre, acts = _forward_cache(net, x)
    delta = np.asarray(grad_outputs, dtype=np.float64).reshape(x.shape[0], net.output_dim)
    grads_w = [None] * net.num_layers
    grads_b = [None] * net.num_layers
    for k in range(net.num_layers - 1, -1, -1):
        grads_w[k] = delta.T @ acts[k]
        grads_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ net.weights[k]) * (pre[k - 1] > 0.0)
    parts = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(gw.ravel())
        parts.append(gb)
    return np.concatenate(parts)


# loss_fn(outputs, targets) -> (per-sample losses, d loss_n / d outputs_n)
LossFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def logistic_loss(outputs: np.ndarray, targets: np.ndarray):
    """``z - z*y + log(1 + exp(-z))`` on the first output column, labels in {0, 1}."""
    z = outputs[:, 0]
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    loss = np.logaddexp(0.0, z) - z * y
    grad = np.zeros_like(outputs)
    grad[:, 0] = _sigmoid(z) - y
    return loss, grad


def squared_loss(outputs: np.ndarray, targets: np.ndarray):
    diff = outputs - np.asarray(targets, dtype=np.float64).reshape(outputs.shape)
    return np.sum(diff**2, axis=1), 2.0 * diff


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def gradient(net: MlpNetwork, loss_fn: LossFn, inputs, targets) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient with respect to the flat parameters."""
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    out = forward(net, x)
    losses, dout = loss_fn(out, targets)
    n = x.shape[0]
    return float(np.mean(losses)), backprop(net, x, dout / n)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class Adam:
    """Adaptive-moment gradient descent on a flat parameter vector."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _m: np.ndarray | None = field(default=None, repr=False)
    _v: np.ndarray | None = field(default=None, repr=False)
    _t: int = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Adam":
        return cls(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps_adam)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self._m is None:
            self._m = np.zeros_like(params)
            self._v = np.zeros_like(params)
        self._t += 1
        self._m = self.beta1 * self._m + (1 - self.beta1) * grad
        self._v = self.beta2 * self._v + (1 - self.beta2) * grad**2
        m_hat = self._m / (1 - self.beta1**self._t)
        v_hat = self._v / (1 - self.beta2**self._t)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def train(net: MlpNetwork, cfg: TrainConfig, loss_fn: LossFn, inputs, targets):
    """Minibatch Adam. Returns ``(trained_net, final_mean_loss)``.

    Deterministic for a fixed ``cfg.seed``; ``epochs == 0`` returns ``net`` itself.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.asarray(targets, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    if cfg.epochs == 0:
        loss, _ = loss_fn(forward(net, x), y)
        return net, float(np.mean(loss))
    rng = np.random.default_rng(cfg.seed)
    opt = Adam.from_config(cfg)
    params = net.flatten()
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, g = gradient(net, loss_fn, x[idx], y[idx])
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            params = opt.step(params, g)
            net = net.with_params(params)
    loss, _ = loss_fn(forward(net, x), y)
    final = float(np.mean(loss))
    if not np.isfinite(final):
        raise TrainingDiverged(f"non-finite loss at epoch {cfg.epochs - 1}")
    return net, final

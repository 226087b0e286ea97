"""Gaussian-posterior BNN policies, interval weight boxes and rejection sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import MlpNetwork

__all__ = [
    "BnnLayer",
    "BnnPolicy",
    "WeightBox",
    "WeightSample",
    "RejectionExhausted",
    "weight_box",
    "sample",
    "rejection_sample",
    "rejection_sample_batch",
    "instantiate",
    "batched_forward",
    "batched_backprop",
]


class RejectionExhausted(RuntimeError):
    """No draw landed inside the weight box within the allowed number of draws."""


@dataclass(frozen=True)
class BnnLayer:
    weight_mean: np.ndarray
    weight_std: np.ndarray
    bias_mean: np.ndarray
    bias_std: np.ndarray
    bayesian: bool = True

    def __post_init__(self):
        wm = np.array(self.weight_mean, dtype=np.float64, ndmin=2)
        ws = np.array(self.weight_std, dtype=np.float64, ndmin=2)
        bm = np.array(self.bias_mean, dtype=np.float64).reshape(-1)
        bsd = np.array(self.bias_std, dtype=np.float64).reshape(-1)
        if ws.shape != wm.shape or bsd.shape != bm.shape or wm.shape[0] != bm.shape[0]:
            raise ValueError("inconsistent shapes in BNN layer")
        if np.any(ws < 0) or np.any(bsd < 0):
            raise ValueError("standard deviations must be non-negative")
        if not self.bayesian and (np.any(ws != 0) or np.any(bsd != 0)):
            raise ValueError("non-Bayesian layer with non-zero standard deviation")
        for name, arr in (("weight_mean", wm), ("weight_std", ws), ("bias_mean", bm), ("bias_std", bsd)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class BnnPolicy:
    """ReLU MLP whose weights are independent Gaussians ``N(mean, std**2)``.

    Parameters are flattened layer by layer, each layer contributing its weight
    matrix (row-major) followed by its bias vector, which is the same order as
    :meth:`MlpNetwork.flatten`.
    """

    layers: tuple[BnnLayer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("policy needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].weight_mean.shape[1] != layers[k - 1].weight_mean.shape[0]:
                raise ValueError(f"layer {k} does not chain with layer {k - 1}")
        object.__setattr__(self, "layers", layers)

    @classmethod
    def from_network(cls, net: MlpNetwork, std: float | Sequence[float], bayesian: Sequence[bool] | None = None):
        """Wrap a deterministic network as BNN means with a uniform std per layer."""
        n = net.num_layers
        bayesian = [True] * n if bayesian is None else list(bayesian)
        stds = [float(std)] * n if np.isscalar(std) else [float(s) for s in std]
        layers = []
        for k, (w, b) in enumerate(zip(net.weights, net.biases)):
            s = stds[k] if bayesian[k] else 0.0
            layers.append(BnnLayer(w, np.full(w.shape, s), b, np.full(b.shape, s), bayesian[k]))
        return cls(tuple(layers))

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight_mean.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight_mean.shape[0]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [layer.weight_mean.shape[0] for layer in self.layers]

    @property
    def bayesian_mask(self) -> list[bool]:
        return [layer.bayesian for layer in self.layers]

    @property
    def num_weights(self) -> int:
        """``p``: the number of weight entries."""
        return sum(layer.weight_mean.size for layer in self.layers)

    @property
    def num_biases(self) -> int:
        """``q``: the number of bias entries."""
        return sum(layer.bias_mean.size for layer in self.layers)

    @property
    def num_params(self) -> int:
        return self.num_weights + self.num_biases

    @property
    def mean(self) -> np.ndarray:
        return self.mean_network().flatten()

    @property
    def std(self) -> np.ndarray:
        parts = []
        for layer in self.layers:
            parts.append(layer.weight_std.ravel())
            parts.append(layer.bias_std)
        return np.concatenate(parts)

    def mean_network(self) -> MlpNetwork:
        return MlpNetwork(
            tuple(layer.weight_mean for layer in self.layers),
            tuple(layer.bias_mean for layer in self.layers),
        )

    def with_mean(self, flat_mean: np.ndarray) -> "BnnPolicy":
        net = self.mean_network().with_params(flat_mean)
        layers = tuple(
            BnnLayer(w, layer.weight_std, b, layer.bias_std, layer.bayesian)
            for w, b, layer in zip(net.weights, net.biases, self.layers)
        )
        return BnnPolicy(layers)

    def to_json(self) -> dict:
        out = []
        for layer in self.layers:
            rows, cols = layer.weight_mean.shape
            out.append(
                {
                    "rows": int(rows),
                    "cols": int(cols),
                    "weight_mean": [float(v) for v in layer.weight_mean.ravel()],
                    "weight_std": [float(v) for v in layer.weight_std.ravel()],
                    "bias_mean": [float(v) for v in layer.bias_mean],
                    "bias_std": [float(v) for v in layer.bias_std],
                    "bayesian": bool(layer.bayesian),
                }
            )
        return {"layers": out}

    @classmethod
    def from_json(cls, obj: dict) -> "BnnPolicy":
        layers = []
        for k, item in enumerate(obj["layers"]):
            wm = np.asarray(item["weight_mean"], dtype=np.float64)
            ws = np.asarray(item["weight_std"], dtype=np.float64)
            if "rows" in item:
                shape = (int(item["rows"]), int(item["cols"]))
                if wm.size != shape[0] * shape[1] or ws.size != wm.size:
                    raise ValueError(f"layer {k}: matrix data does not match {shape}")
                wm, ws = wm.reshape(shape), ws.reshape(shape)
            layers.append(
                BnnLayer(wm, ws, item["bias_mean"], item["bias_std"], bool(item.get("bayesian", True)))
            )
        return cls(tuple(layers))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "BnnPolicy":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class WeightBox:
    """Axis-aligned box ``[lower, upper]`` of flat parameter vectors centred on the means."""

    lower: np.ndarray
    upper: np.ndarray
    eps_scale: float | None = None

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("weight box needs lower <= upper with matching shapes")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def halfwidth(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def contains(self, params) -> np.ndarray | bool:
        p = np.asarray(params)
        inside = np.all((p >= self.lower) & (p <= self.upper), axis=-1)
        return bool(inside) if p.ndim == 1 else inside

    def layer_slices(self, policy: BnnPolicy):
        """Yield ``(weight_lo, weight_hi, bias_lo, bias_hi)`` per layer."""
        pos = 0
        for layer in policy.layers:
            shape = layer.weight_mean.shape
            n_w, n_b = layer.weight_mean.size, layer.bias_mean.size
            yield (
                self.lower[pos:pos + n_w].reshape(shape),
                self.upper[pos:pos + n_w].reshape(shape),
                self.lower[pos + n_w:pos + n_w + n_b],
                self.upper[pos + n_w:pos + n_w + n_b],
            )
            pos += n_w + n_b


@dataclass(frozen=True)
class WeightSample:
    params: np.ndarray
    accepted: bool
    draws_used: int


def weight_box(policy: BnnPolicy, eps_scale: float, relative: bool = True) -> WeightBox:
    """Box ``mean +- eps`` over all parameters.

    With ``relative=True`` (default) each half-width is ``eps_scale * std_i``.
    Otherwise the half-width is the absolute ``eps_scale`` for every parameter
    with a non-zero standard deviation; deterministic parameters stay fixed.
    """
    eps_scale = float(eps_scale)
    if not np.isfinite(eps_scale) or eps_scale < 0:
        raise ValueError(f"eps_scale must be finite and non-negative, got {eps_scale}")
    mu, sd = policy.mean, policy.std
    half = eps_scale * sd if relative else np.where(sd > 0, eps_scale, 0.0)
    return WeightBox(mu - half, mu + half, eps_scale)


def sample(policy: BnnPolicy, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw parameter vector(s) from the independent Gaussian posterior."""
    mu, sd = policy.mean, policy.std
    shape = mu.shape if size is None else (size, mu.size)
    return mu + sd * rng.standard_normal(shape)


def rejection_sample(policy: BnnPolicy, box: WeightBox, rng: np.random.Generator, max_draws: int = 1000) -> WeightSample:
    """Redraw the whole parameter vector until it lies in ``box``."""
    if max_draws < 1:
        raise ValueError("max_draws must be >= 1")
    params = None
    for draw in range(1, max_draws + 1):
        params = sample(policy, rng)
        if box.contains(params):
            return WeightSample(params, True, draw)
    return WeightSample(params, False, max_draws)


def rejection_sample_batch(policy: BnnPolicy, box: WeightBox, rng: np.random.Generator, n: int,
                           max_draws: int = 1000, method: str = "coordinate") -> np.ndarray:
    """``n`` independent draws from the posterior conditioned on ``box``, as an ``(n, P)`` array.

    ``method="vector"`` redraws every random coordinate of a row until the whole
    row lies in the box. ``method="coordinate"`` redraws each coordinate until
    it lies in its own interval. Coordinates are independent, so both produce
    the same truncated-product distribution, but the vector form needs about
    ``1 / prod_i P(coordinate i accepted)`` draws and is hopeless for narrow
    boxes over many parameters. Coordinates whose interval has zero width are
    set to their mean in coordinate mode, which is the limit of the
    conditional distribution.
    Raises :class:`RejectionExhausted` if anything fails ``max_draws`` times.
    """
    if max_draws < 1:
        raise ValueError("max_draws must be >= 1")
    if method not in ("vector", "coordinate"):
        raise ValueError(f"unknown rejection method {method!r}")
    mu, sd = policy.mean, policy.std
    out = np.tile(mu, (n, 1))
    rand = np.flatnonzero(sd > 0)
    if method == "coordinate":
        rand = rand[box.upper[rand] > box.lower[rand]]
    if rand.size == 0 or n == 0:
        return out
    lo, hi = box.lower[rand], box.upper[rand]
    m, s = mu[rand], sd[rand]
    if method == "vector":
        pending = np.arange(n)
        for _ in range(max_draws):
            draw = m + s * rng.standard_normal((pending.size, rand.size))
            ok = np.all((draw >= lo) & (draw <= hi), axis=1)
            out[pending[ok][:, None], rand[None, :]] = draw[ok]
            pending = pending[~ok]
            if pending.size == 0:
                return out
        raise RejectionExhausted(f"{pending.size} of {n} samples not accepted after {max_draws} draws")
    vals = np.empty((n, rand.size))
    todo = np.ones((n, rand.size), dtype=bool)
    for _ in range(max_draws):
        rows, cols = np.nonzero(todo)
        draw = m[cols] + s[cols] * rng.standard_normal(rows.size)
        ok = (draw >= lo[cols]) & (draw <= hi[cols])
        vals[rows[ok], cols[ok]] = draw[ok]
        todo[rows[ok], cols[ok]] = False
        if not todo.any():
            out[:, rand] = vals
            return out
    raise RejectionExhausted(f"{int(todo.sum())} coordinates not accepted after {max_draws} draws")


def instantiate(policy: BnnPolicy, params) -> MlpNetwork:
    """Deterministic network ``pi_{w,b}`` for a flat parameter vector."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (policy.num_params,):
        raise ValueError(f"expected {policy.num_params} parameters, got shape {params.shape}")
    return policy.mean_network().with_params(params)


def batched_forward(policy: BnnPolicy, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row ``n`` of the result is ``instantiate(policy, params[n])(x[n])``."""
    params = np.atleast_2d(params)
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    pos = 0
    last = len(policy.layers) - 1
    for k, layer in enumerate(policy.layers):
        rows, cols = layer.weight_mean.shape
        w = params[:, pos:pos + rows * cols].reshape(-1, rows, cols)
        pos += rows * cols
        b = params[:, pos:pos + rows]
        pos += rows
        h = np.einsum("nij,nj->ni", w, h) + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h


def batched_backprop(policy: BnnPolicy, params: np.ndarray, x: np.ndarray, grad_outputs: np.ndarray) -> np.ndarray:
    """Per-row parameter gradients of ``grad_outputs[n] . pi_{params[n]}(x[n])``, shape ``(N, P)``."""
    params = np.atleast_2d(params)
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = h.shape[0]
    mats, acts, pres = [], [h], []
    pos = 0
    last = len(policy.layers) - 1
    for k, layer in enumerate(policy.layers):
        rows, cols = layer.weight_mean.shape
        w = params[:, pos:pos + rows * cols].reshape(-1, rows, cols)
        pos += rows * cols
        b = params[:, pos:pos + rows]
        pos += rows
        mats.append(w)
        z = np.einsum("nij,nj->ni", w, h) + b
        pres.append(z)
        h = np.maximum(z, 0.0) if k < last else z
        acts.append(h)
    delta = np.asarray(grad_outputs, dtype=np.float64).reshape(n, policy.output_dim)
    parts = []
    for k in range(last, -1, -1):
        gw = delta[:, :, None] * acts[k][:, None, :]
        parts.append(delta)
        parts.append(gw.reshape(n, -1))
        if k > 0:
            delta = np.einsum("ni,nij->nj", delta, mats[k]) * (pres[k - 1] > 0.0)
    return np.concatenate(parts[::-1], axis=1)

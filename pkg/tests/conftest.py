import time
from contextlib import contextmanager

import numpy as np
import pytest

from bnnsafe.bnn import BnnPolicy
from bnnsafe.nn import MlpNetwork, forward


def central_difference(fn, params, h=1e-5):
    """Central finite differences of a scalar function of a flat vector."""
    grad = np.zeros_like(params)
    for i in range(params.size):
        step = np.zeros_like(params)
        step[i] = h
        grad[i] = (fn(params + step) - fn(params - step)) / (2 * h)
    return grad


def near_kink(net: MlpNetwork, x, margin=1e-6) -> bool:
    """True if any hidden pre-activation of ``net`` on ``x`` is within ``margin`` of 0."""
    h = np.atleast_2d(x)
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        z = h @ w.T + b
        if np.any(np.abs(z) < margin):
            return True
        h = np.maximum(z, 0.0)
    return False


def hand_forward(net: MlpNetwork, x):
    """Scalar-loop evaluation used as an independent oracle for ``forward``."""
    h = [float(v) for v in x]
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        out = []
        for i in range(w.shape[0]):
            acc = float(b[i])
            for j in range(w.shape[1]):
                acc += float(w[i, j]) * h[j]
            if k < net.num_layers - 1:
                acc = acc if acc > 0 else 0.0
            out.append(acc)
        h = out
    return np.array(h)


def toy_policy(hidden=2, std=0.1):
    """A 1-input policy with zero means; Bayesian from the second layer."""
    return BnnPolicy.from_network(MlpNetwork.zeros([1, hidden, 1]), [0.0, std], [False, True])


def random_policy(sizes, rng, std=0.1, bayesian=None):
    net = MlpNetwork.random(sizes, rng)
    return BnnPolicy.from_network(net, std, bayesian)


ACCEPTANCE: dict[int, str] = {}


@contextmanager
def criterion(number: int, title: str):
    """Record one acceptance line (PASS or FAIL with the reason) for the terminal summary."""
    start = time.monotonic()
    notes: list[str] = []
    try:
        yield notes
    except BaseException as exc:
        reason = " ".join(str(exc).split())[:300]
        line = f"[{number}] FAIL {title} ({time.monotonic() - start:.0f}s): {type(exc).__name__}: {reason}"
        ACCEPTANCE[number] = line
        print(line)
        raise
    detail = f"; {'; '.join(notes)}" if notes else ""
    line = f"[{number}] PASS {title} ({time.monotonic() - start:.0f}s){detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


__all__ = ["criterion", "central_difference", "near_kink", "hand_forward", "toy_policy", "random_policy", "forward"]

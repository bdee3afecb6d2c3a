"""Small dense networks with hand-rolled reverse-mode gradients.

Kept deliberately minimal: fully-connected layers, a fixed hidden activation,
linear output, and an adaptive-moment first-order optimizer.  Everything is
float64 numpy, so training is bitwise reproducible for a fixed seed and data
order.
"""

from __future__ import annotations

import numpy as np


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


ACTIVATIONS = {
    "relu": (
        lambda z: np.maximum(z, 0.0),
        lambda z: (z > 0).astype(float),
    ),
    "elu": (
        lambda z: np.where(z > 0, z, np.expm1(np.minimum(z, 0.0))),
        lambda z: np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0))),
    ),
    "softplus": (softplus, sigmoid),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}


class DenseNet:
    """Fully-connected net: hidden activation on all but the last layer."""

    def __init__(self, layer_sizes, activation: str, rng: np.random.Generator):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_sizes = list(layer_sizes)
        self.activation = activation
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            scale = np.sqrt(2.0 / fan_in) if activation == "relu" else np.sqrt(1.0 / fan_in)
            self.weights.append(rng.standard_normal((fan_in, fan_out)) * scale)
            self.biases.append(np.zeros(fan_out))
        self._inputs = None
        self._zs = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Batch forward pass; caches intermediates for backward."""
        act, _ = ACTIVATIONS[self.activation]
        self._inputs = []
        self._zs = []
        a = np.asarray(x, dtype=float)
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            self._inputs.append(a)
            z = a @ W + b
            self._zs.append(z)
            a = act(z) if i < last else z
        return a

    def backward(self, grad_out: np.ndarray):
        """Gradients of the cached forward pass w.r.t. weights and biases."""
        _, dact = ACTIVATIONS[self.activation]
        n = len(self.weights)
        gw = [None] * n
        gb = [None] * n
        g = grad_out
        for i in reversed(range(n)):
            gw[i] = self._inputs[i].T @ g
            gb[i] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i].T) * dact(self._zs[i - 1])
        return gw, gb

    # -- parameter plumbing -------------------------------------------------

    def parameters(self):
        return self.weights + self.biases

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat_parameters(self, flat: np.ndarray) -> None:
        k = 0
        for p in self.parameters():
            p.flat[:] = flat[k:k + p.size]
            k += p.size
        if k != len(flat):
            raise ValueError("flat parameter size mismatch")

    def copy(self) -> "DenseNet":
        dup = DenseNet.__new__(DenseNet)
        dup.layer_sizes = list(self.layer_sizes)
        dup.activation = self.activation
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        dup._inputs = None
        dup._zs = None
        return dup


class AdamOptimizer:
    """Adaptive-moment first-order updates with bias correction."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

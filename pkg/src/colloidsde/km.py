"""Burst-moment drift/diffusivity estimation and latent-space integration.

The local estimator turns an ensemble of short-time endpoints from one
starting point into first and second transition moments:

    drift_i      = <x_i(h) - x_i(0)> / h
    sigma_ii^2   = <(x_i(h) - x_i(0))^2> / h       (diagonal model)

The short-time drift contribution to the second moment is not removed, so
``sigma^2`` carries an O(h * drift^2) bias that vanishes with the burst
duration.  Tabulated fields are evaluated by nearest anchor and integrated
with the explicit Euler-Maruyama scheme.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SnapshotPair:
    """One (state, later state, step, parameter) training atom."""

    x_k: np.ndarray
    x_kh: np.ndarray
    h: float
    p: float

    def __post_init__(self):
        self.x_k = np.asarray(self.x_k, dtype=float)
        self.x_kh = np.asarray(self.x_kh, dtype=float)
        if not self.h > 0:
            raise ValueError("snapshot step h must be positive")
        if not (np.all(np.isfinite(self.x_k)) and np.all(np.isfinite(self.x_kh))
                and np.isfinite(self.p)):
            raise ValueError("snapshot pair entries must be finite")


@dataclass
class TabulatedModel:
    """Per-anchor drift vectors and diagonal noise amplitudes."""

    anchors: np.ndarray       # (M, 2)
    drift: np.ndarray         # (M, 2)
    sigma: np.ndarray         # (M, 2) diagonal entries of the noise amplitude

    def __post_init__(self):
        self.anchors = np.atleast_2d(np.asarray(self.anchors, dtype=float))
        self.drift = np.atleast_2d(np.asarray(self.drift, dtype=float))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if len(self.anchors) < 1:
            raise ValueError("tabulated model needs at least one anchor")
        if np.any(self.sigma < 0):
            raise ValueError("noise amplitudes must be nonnegative")

    def drift_and_noise(self, x: np.ndarray, p: float = 0.0):
        """Nearest-anchor drift vector and lower-triangular noise factor."""
        nu, sig = nn_evaluate(self, x)
        return nu, np.diag(sig)

    def evaluate_batch(self, x: np.ndarray, p: float = 0.0):
        """Vectorized nearest-anchor evaluation for many query points."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d2 = ((x[:, None, :] - self.anchors[None, :, :]) ** 2).sum(-1)
        idx = np.argmin(d2, axis=1)
        nu = self.drift[idx]
        L = np.zeros((len(x), 2, 2))
        L[:, 0, 0] = self.sigma[idx, 0]
        L[:, 1, 1] = self.sigma[idx, 1]
        return nu, L


def km_point_estimate(endpoints, x0, h: float):
    """Transition moments of burst endpoints started from ``x0``.

    Returns ``(drift, sigma)`` where ``sigma`` holds the square roots of the
    per-dimension second moments over ``h``.
    """
    endpoints = np.atleast_2d(np.asarray(endpoints, dtype=float))
    x0 = np.asarray(x0, dtype=float)
    if len(endpoints) == 0:
        raise ValueError("empty burst")
    if not h > 0:
        raise ValueError("burst duration h must be positive")
    disp = endpoints - x0[None, :]
    drift = disp.mean(axis=0) / h
    second = (disp**2).mean(axis=0) / h
    return drift, np.sqrt(second)


def km_field(anchors, burst_fn, n_replicas: int, h: float) -> TabulatedModel:
    """Assemble a tabulated model by running bursts from every anchor.

    ``burst_fn(anchor_index, n_replicas, h)`` must return latent endpoints
    as an (n_replicas, 2) array.  Failures are re-raised with the anchor id.
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    drift = np.empty_like(anchors)
    sigma = np.empty_like(anchors)
    for i, x0 in enumerate(anchors):
        try:
            endpoints = burst_fn(i, n_replicas, h)
            drift[i], sigma[i] = km_point_estimate(endpoints, x0, h)
        except Exception as exc:
            raise RuntimeError(f"burst estimation failed at anchor {i}: {exc}") from exc
    return TabulatedModel(anchors, drift, sigma)


def nn_evaluate(model: TabulatedModel, x):
    """Values at the anchor nearest to ``x``; ties go to the lowest index."""
    xv = np.asarray(x, dtype=float)
    d2 = ((model.anchors - xv[None, :]) ** 2).sum(axis=1)
    i = int(np.argmin(d2))
    return model.drift[i].copy(), model.sigma[i].copy()


def em_integrate(model, x0, h: float, n_steps: int, rng: np.random.Generator,
                 p: float = 0.0) -> np.ndarray:
    """Explicit Euler-Maruyama path from ``x0``; returns (n_steps+1, 2).

    ``model`` must expose ``drift_and_noise(x, p) -> (nu, L)`` with ``L`` the
    (lower-triangular or diagonal) factor multiplying the Wiener increments.
    Deterministic for a given generator state.
    """
    if not h > 0:
        raise ValueError("integration step h must be positive")
    x = np.asarray(x0, dtype=float).copy()
    path = np.empty((n_steps + 1, len(x)))
    path[0] = x
    sqrt_h = np.sqrt(h)
    for k in range(n_steps):
        try:
            nu, L = model.drift_and_noise(x, p)
        except Exception as exc:
            raise RuntimeError(f"model evaluation failed at step {k}: {exc}") from exc
        z = rng.standard_normal(len(x))
        x = x + nu * h + (L @ z) * sqrt_h
        path[k + 1] = x
    return path


def save_tabulated(path, model: TabulatedModel) -> None:
    from .io_utils import write_table

    write_table(path, {
        "phi1": model.anchors[:, 0], "phi2": model.anchors[:, 1],
        "nu1": model.drift[:, 0], "nu2": model.drift[:, 1],
        "sigma11": model.sigma[:, 0], "sigma22": model.sigma[:, 1],
    }, comment="tabulated drift/diffusivity field (nearest-anchor evaluation)")


def load_tabulated(path) -> TabulatedModel:
    from .io_utils import read_table

    _, data = read_table(path)
    return TabulatedModel(data[:, 0:2], data[:, 2:4], data[:, 4:6])

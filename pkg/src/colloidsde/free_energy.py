"""Effective-potential reconstruction from a fitted latent SDE.

The landscape comes from the stationarity condition of the transition
dynamics: along a straight ray from the origin (the reference state) to each
grid node,

    G(x)/kT = - integral_0^x [ 2 (sigma^2)^{-1} (nu - div(sigma^2)/2) ] . dr

evaluated with a composite midpoint rule.  ``div(sigma^2)`` is the
column-wise divergence of the covariance field, estimated by central finite
differences of the model.  Straight rays make the integral exact for
conservative integrands; a boundary loop integral is reported as a
diagnostic for non-conservative fits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_SUBSTEPS = 200
_SINGULAR_DET = 1e-300


@dataclass
class PotentialField:
    """Per-node effective potential with the origin as reference."""

    nodes: np.ndarray
    values: np.ndarray
    reference: int
    evaluable: np.ndarray

    def __post_init__(self):
        if abs(self.values[self.reference]) != 0.0:
            raise ValueError("reference node potential must be exactly 0")
        ok = self.evaluable
        if not np.all(np.isfinite(self.values[ok])):
            raise ValueError("potential must be finite on evaluable nodes")


def _batch_eval(model, points: np.ndarray, p):
    """Drift vectors and covariance matrices at many points."""
    if hasattr(model, "evaluate_batch"):
        nu, L = model.evaluate_batch(points, p)
    else:
        nus, Ls = [], []
        for q in points:
            nu_i, L_i = model.drift_and_noise(q, p)
            nus.append(nu_i)
            Ls.append(L_i)
        nu, L = np.stack(nus), np.stack(Ls)
    cov = L @ np.swapaxes(L, -1, -2)
    return nu, cov


def divergence_sigma2(model, x, p, step: float) -> np.ndarray:
    """Central-difference divergence of the covariance field at one point.

    Component ``i`` is ``sum_j d(sigma^2)_ij / dx_j``.
    """
    if not step > 0:
        raise ValueError("finite-difference step must be positive")
    x = np.asarray(x, float)
    probes = np.array([
        x + [step, 0], x - [step, 0],
        x + [0, step], x - [0, step],
    ])
    _, cov = _batch_eval(model, probes, p)
    dcov_dx = (cov[0] - cov[1]) / (2 * step)
    dcov_dy = (cov[2] - cov[3]) / (2 * step)
    return np.array([dcov_dx[0, 0] + dcov_dy[0, 1],
                     dcov_dx[1, 0] + dcov_dy[1, 1]])


def _divergence_batch(model, points: np.ndarray, p, step: float) -> np.ndarray:
    offsets = np.array([[step, 0], [-step, 0], [0, step], [0, -step]])
    probes = (points[None, :, :] + offsets[:, None, :]).reshape(-1, 2)
    _, cov = _batch_eval(model, probes, p)
    cov = cov.reshape(4, len(points), 2, 2)
    dcov_dx = (cov[0] - cov[1]) / (2 * step)
    dcov_dy = (cov[2] - cov[3]) / (2 * step)
    div = np.empty((len(points), 2))
    div[:, 0] = dcov_dx[:, 0, 0] + dcov_dy[:, 0, 1]
    div[:, 1] = dcov_dx[:, 1, 0] + dcov_dy[:, 1, 1]
    return div


def _integrand(model, points: np.ndarray, p, fd_step: float):
    """``2 (sigma^2)^{-1} (nu - div/2)`` and a per-point validity mask."""
    nu, cov = _batch_eval(model, points, p)
    div = _divergence_batch(model, points, p, fd_step)
    rhs = nu - 0.5 * div
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    ok = np.abs(det) > _SINGULAR_DET
    safe_det = np.where(ok, det, 1.0)
    g = np.empty_like(rhs)
    g[:, 0] = (cov[:, 1, 1] * rhs[:, 0] - cov[:, 0, 1] * rhs[:, 1]) / safe_det
    g[:, 1] = (-cov[:, 1, 0] * rhs[:, 0] + cov[:, 0, 0] * rhs[:, 1]) / safe_det
    return 2.0 * g, ok


def effective_potential(model, nodes: np.ndarray, p=0.0,
                        n_substeps: int = DEFAULT_SUBSTEPS,
                        fd_step: float | None = None) -> PotentialField:
    """Integrate the potential from the origin to every node.

    ``nodes`` is an (n, 2) array whose bounding box must contain the origin.
    The origin is appended as the zero-valued reference node when it is not
    already present.  Nodes whose ray crosses a singular covariance are
    flagged non-evaluable instead of failing the whole field.
    """
    nodes = np.atleast_2d(np.asarray(nodes, float))
    lo = nodes.min(axis=0)
    hi = nodes.max(axis=0)
    if np.any(lo > 0) or np.any(hi < 0):
        raise ValueError("node bounding box must contain the origin")
    if fd_step is None:
        span = max(hi[0] - lo[0], hi[1] - lo[1])
        fd_step = span / max(len(np.unique(nodes[:, 0])) - 1, 1) / 10.0
        if fd_step <= 0:
            fd_step = 1e-4

    norms = np.sqrt((nodes**2).sum(axis=1))
    ref = int(np.argmin(norms))
    if norms[ref] > 0:
        nodes = np.vstack([nodes, [0.0, 0.0]])
        ref = len(nodes) - 1

    n = len(nodes)
    t_mid = (np.arange(n_substeps) + 0.5) / n_substeps
    samples = (t_mid[None, :, None] * nodes[:, None, :]).reshape(-1, 2)
    g, ok = _integrand(model, samples, p, fd_step)
    g = g.reshape(n, n_substeps, 2)
    ok = ok.reshape(n, n_substeps).all(axis=1)
    values = -(g * nodes[:, None, :]).sum(axis=2).mean(axis=1)
    values[~ok] = np.nan
    values[ref] = 0.0
    ok[ref] = True
    return PotentialField(nodes, values, ref, ok)


def boundary_loop_residue(model, nodes: np.ndarray, p=0.0,
                          n_substeps: int = DEFAULT_SUBSTEPS,
                          fd_step: float | None = None) -> float:
    """Loop integral of the integrand around the node bounding box.

    Zero for conservative integrands; reported as a diagnostic of how
    path-dependent the reconstructed potential is.
    """
    nodes = np.atleast_2d(np.asarray(nodes, float))
    lo = nodes.min(axis=0)
    hi = nodes.max(axis=0)
    if fd_step is None:
        fd_step = max(hi[0] - lo[0], hi[1] - lo[1]) / 200.0
    corners = np.array([
        [lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]],
        [lo[0], lo[1]],
    ])
    total = 0.0
    t_mid = (np.arange(n_substeps) + 0.5) / n_substeps
    for a, b in zip(corners[:-1], corners[1:]):
        seg = b - a
        pts = a[None, :] + t_mid[:, None] * seg[None, :]
        g, ok = _integrand(model, pts, p, fd_step)
        if not ok.all():
            return float("nan")
        total += float((g @ seg).mean())
    return total


def divergence_drift_ratio(model, nodes: np.ndarray, p=0.0,
                           fd_step: float = 1e-3) -> float:
    """Mean magnitude ratio of the ``div(sigma^2)/2`` term to the drift term.

    A small value supports dropping the covariance-gradient correction.
    """
    nodes = np.atleast_2d(np.asarray(nodes, float))
    nu, _ = _batch_eval(model, nodes, p)
    div = _divergence_batch(model, nodes, p, fd_step)
    drift_norm = np.linalg.norm(nu, axis=1)
    div_norm = 0.5 * np.linalg.norm(div, axis=1)
    keep = drift_norm > 1e-12
    if not keep.any():
        return float("nan")
    return float(np.mean(div_norm[keep] / drift_norm[keep]))


def save_potential(path, field: PotentialField) -> None:
    from .io_utils import write_table

    write_table(path, {
        "phi1": field.nodes[:, 0],
        "phi2": field.nodes[:, 1],
        "G_over_kT": field.values,
        "evaluable": field.evaluable.astype(float),
    }, comment="effective potential on latent grid (origin reference)")

"""Alignment and density-field featurization of particle configurations.

A configuration becomes comparable to others by (1) centering, (2) rigid
alignment to a shared reference via the Kabsch rotation, and (3) Gaussian
kernel density estimation on a fixed grid, normalized to unit integral.
The density map is permutation-invariant by construction and, through the
alignment, insensitive to rigid motions of the input.

Particle correspondence for the Kabsch step is index-based after sorting
both point sets by (angle, radius) about the centroid; the cut point of the
angular sort is resolved by scanning all cyclic shifts for the smallest
alignment residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bd import ParticleConfiguration
from .order_params import radius_of_gyration

REFERENCE_DILATION = 1.5
DEFAULT_GRID_SIZE = 64


@dataclass
class GridSpec:
    """Square raster of G x G nodes over fixed bounds."""

    bounds: tuple  # (xmin, xmax, ymin, ymax)
    size: int = DEFAULT_GRID_SIZE

    def __post_init__(self):
        xmin, xmax, ymin, ymax = self.bounds
        if not (xmax > xmin and ymax > ymin):
            raise ValueError("grid bounds must be nonempty")
        if self.size < 2:
            raise ValueError("grid size must be at least 2")
        self.bounds = (float(xmin), float(xmax), float(ymin), float(ymax))

    @property
    def x_nodes(self) -> np.ndarray:
        return np.linspace(self.bounds[0], self.bounds[1], self.size)

    @property
    def y_nodes(self) -> np.ndarray:
        return np.linspace(self.bounds[2], self.bounds[3], self.size)

    @property
    def cell_area(self) -> float:
        dx = (self.bounds[1] - self.bounds[0]) / (self.size - 1)
        dy = (self.bounds[3] - self.bounds[2]) / (self.size - 1)
        return dx * dy

    def nodes(self) -> np.ndarray:
        xx, yy = np.meshgrid(self.x_nodes, self.y_nodes, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])


@dataclass
class AlignedConfiguration:
    """Centered, reference-aligned positions plus the rotation applied."""

    positions: np.ndarray
    rotation: np.ndarray
    reference_id: str = ""

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.rotation = np.asarray(self.rotation, dtype=float)
        if np.abs(self.positions.mean(axis=0)).max() > 1e-10:
            raise ValueError("aligned positions must be centered")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(2), atol=1e-10):
            raise ValueError("rotation must be orthogonal")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation must be proper (det +1)")


@dataclass
class DensityField:
    """Nonnegative G x G density raster with unit Riemann integral."""

    values: np.ndarray
    grid: GridSpec
    bandwidth: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.size, self.grid.size):
            raise ValueError("values shape must match the grid")
        if np.any(self.values < 0):
            raise ValueError("density values must be nonnegative")
        integral = self.values.sum() * self.grid.cell_area
        if abs(integral - 1.0) > 1e-6:
            raise ValueError(f"density integral {integral} not within 1e-6 of 1")

    def flat(self) -> np.ndarray:
        return self.values.ravel()


def _positions_of(c) -> np.ndarray:
    return np.asarray(getattr(c, "positions", c), dtype=float)


def center(c: ParticleConfiguration) -> ParticleConfiguration:
    """Translate the centroid to the origin."""
    pos = _positions_of(c)
    out = pos - pos.mean(axis=0)
    if isinstance(c, ParticleConfiguration):
        return ParticleConfiguration(out, params_ref=c.params_ref, time=c.time)
    return ParticleConfiguration(out)


def canonical_order(positions: np.ndarray) -> np.ndarray:
    """Sort rows by (angle, radius) about the centroid; deterministic."""
    pos = np.asarray(positions, dtype=float)
    rel = pos - pos.mean(axis=0)
    ang = np.arctan2(rel[:, 1], rel[:, 0])
    rad = np.sqrt((rel**2).sum(axis=1))
    return pos[np.lexsort((rad, ang))]


def kabsch_align(c, ref, reference_id: str = "") -> AlignedConfiguration:
    """Optimal proper rotation of ``c`` onto ``ref`` with index correspondence.

    Both inputs must be centered and of equal size.  The rotation comes from
    the SVD of the cross-covariance with the usual sign correction forcing a
    proper rotation.  Degenerate (collinear) inputs raise.
    """
    cp = _positions_of(c)
    rp = _positions_of(ref)
    if cp.shape != rp.shape:
        raise ValueError("configurations must have the same particle count")
    for name, arr in (("input", cp), ("reference", rp)):
        if np.abs(arr.mean(axis=0)).max() > 1e-8:
            raise ValueError(f"{name} configuration must be centered")
    H = cp.T @ rp
    U, S, Vt = np.linalg.svd(H)
    if S[0] <= 0 or S[1] <= 1e-12 * S[0]:
        raise ValueError("degenerate (collinear) configuration in alignment")
    d = np.sign(np.linalg.det(U @ Vt))
    R = U @ np.diag([1.0, d]) @ Vt
    aligned = cp @ R
    aligned = aligned - aligned.mean(axis=0)
    return AlignedConfiguration(aligned, R, reference_id=reference_id)


def _best_cyclic_shift(c_sorted: np.ndarray, ref_sorted: np.ndarray) -> int:
    """Cyclic shift of the angular ordering minimizing the rigid residual.

    For planar point sets the optimal-rotation residual at a given pairing is
    ``|c|^2 + |ref|^2 - 2 sqrt(dot^2 + cross^2)``, so the best shift maximizes
    ``hypot(dot_s, cross_s)`` over all cyclic shifts ``s``.
    """
    n = len(c_sorted)
    dots = c_sorted @ ref_sorted.T                      # dots[k, i] = c_k . ref_i
    crosses = np.outer(c_sorted[:, 0], ref_sorted[:, 1]) - \
        np.outer(c_sorted[:, 1], ref_sorted[:, 0])
    idx = (np.arange(n)[None, :] + np.arange(n)[:, None]) % n
    cols = np.arange(n)[None, :]
    dot_s = dots[idx, cols].sum(axis=1)
    cross_s = crosses[idx, cols].sum(axis=1)
    quality = np.hypot(dot_s, cross_s)
    return int(np.argmax(quality))


def align_to_reference(c, ref_sorted: np.ndarray,
                       reference_id: str = "") -> AlignedConfiguration:
    """Full assignment + alignment of an arbitrary configuration.

    Centers the input, sorts it into the canonical angular order, picks the
    cyclic shift with the smallest alignment residual against the (already
    sorted, centered) reference, and applies the Kabsch rotation.
    """
    pos = _positions_of(c)
    # canonical row order before any reduction keeps the result bitwise
    # independent of the input row permutation
    pos = pos[np.lexsort((pos[:, 1], pos[:, 0]))]
    pos = pos - pos.mean(axis=0)
    cs = canonical_order(pos)
    shift = _best_cyclic_shift(cs, ref_sorted)
    return kabsch_align(np.roll(cs, -shift, axis=0), ref_sorted, reference_id)


def scott_bandwidth(n: int, d: int, sigma: float) -> float:
    """Rule-of-thumb kernel bandwidth ``sigma * n**(-1/(d+4))``."""
    if n < 2:
        raise ValueError("bandwidth rule needs at least 2 samples")
    return float(sigma) * float(n) ** (-1.0 / (d + 4))


def kde_density(c, grid: GridSpec, bandwidth: float | None = None) -> DensityField:
    """Isotropic Gaussian KDE on the grid nodes, renormalized to unit integral.

    The default bandwidth applies the rule of thumb with the mean of the
    per-axis standard deviations as the spread scale.  Particles outside the
    grid bounds raise an error naming the first offender.
    """
    pos = _positions_of(c)
    n = len(pos)
    xmin, xmax, ymin, ymax = grid.bounds
    outside = ((pos[:, 0] < xmin) | (pos[:, 0] > xmax) |
               (pos[:, 1] < ymin) | (pos[:, 1] > ymax))
    if outside.any():
        k = int(np.argmax(outside))
        raise ValueError(
            f"particle {k} at ({pos[k, 0]:.4g}, {pos[k, 1]:.4g}) "
            f"outside grid bounds {grid.bounds}"
        )
    if bandwidth is None:
        sigma = 0.5 * (pos[:, 0].std() + pos[:, 1].std())
        bandwidth = scott_bandwidth(n, 2, sigma)
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    nodes = grid.nodes()
    d2 = ((nodes[None, :, :] - pos[:, None, :]) ** 2).sum(-1)
    raw = np.exp(-d2 / (2.0 * bandwidth**2)).sum(axis=0)
    raw /= raw.sum() * grid.cell_area
    return DensityField(raw.reshape(grid.size, grid.size), grid, float(bandwidth))


def select_reference(configs) -> ParticleConfiguration:
    """Configuration of smallest radius of gyration; ties to the earliest."""
    configs = list(configs)
    if not configs:
        raise ValueError("empty configuration set")
    rgs = [radius_of_gyration(c) for c in configs]
    return configs[int(np.argmin(rgs))]


def reference_grid(ref_positions: np.ndarray, size: int = DEFAULT_GRID_SIZE,
                   dilation: float = REFERENCE_DILATION) -> GridSpec:
    """Pipeline-wide grid: reference bounding box dilated about its center."""
    pos = np.asarray(ref_positions, dtype=float)
    cx, cy = pos.mean(axis=0)
    half_x = dilation * max(np.abs(pos[:, 0] - cx).max(), 1e-9)
    half_y = dilation * max(np.abs(pos[:, 1] - cy).max(), 1e-9)
    return GridSpec((cx - half_x, cx + half_x, cy - half_y, cy + half_y), size)


def density_for_configuration(c, ref_sorted: np.ndarray, grid: GridSpec,
                              reference_id: str = "") -> DensityField:
    """Center, align to the sorted reference, and rasterize the density."""
    aligned = align_to_reference(c, ref_sorted, reference_id)
    return kde_density(aligned.positions, grid)


def ingest_external(path, radius_scale: float | None = None,
                    reference_rg: float | None = None) -> list:
    """Load externally recorded trajectories and rescale to internal units.

    ``radius_scale`` multiplies all coordinates directly; when omitted it is
    derived as ``reference_rg / rg(external reference)`` with the external
    reference chosen by minimum radius of gyration among the loaded frames.
    """
    from .io_utils import read_trajectory

    traj = read_trajectory(path)
    frames = traj.frames
    if not frames:
        raise ValueError(f"no frames in external file {path}")
    if radius_scale is None:
        if reference_rg is None:
            raise ValueError("need radius_scale or reference_rg to rescale")
        ext_ref = select_reference(frames)
        radius_scale = reference_rg / radius_of_gyration(ext_ref)
    return [
        ParticleConfiguration(f.positions * radius_scale,
                              params_ref=f.params_ref, time=f.time)
        for f in frames
    ]

"""Diffusion-map latent coordinates over density fields.

Builds the Gaussian-kernel Markov matrix with sampling-density normalization
(alpha = 1), extracts its leading spectrum through the symmetric conjugate
matrix, picks non-harmonic coordinates by local linear regression residuals,
and embeds out-of-sample points through the eigenvector interpolation formula
(restriction).  Latent points map back to configurations by the
nearest-training-neighbor rule (lifting).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh

DEFAULT_N_EIGENPAIRS = 10
NONHARMONIC_THRESHOLD = 0.5
MIN_EXTENSION_EIGENVALUE = 1e-10
_EPSILON_EXACT_LIMIT = 4000


def _sq_dists(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances via the inner-product expansion."""
    nx = (X * X).sum(axis=1)
    ny = (Y * Y).sum(axis=1)
    d2 = nx[:, None] + ny[None, :] - 2.0 * (X @ Y.T)
    return np.maximum(d2, 0.0)


def choose_epsilon(F: np.ndarray) -> float:
    """Median of pairwise squared distances; subsampled above 4000 points."""
    F = np.asarray(F, dtype=float)
    m = len(F)
    if m < 2:
        raise ValueError("need at least 2 fields to choose a kernel scale")
    if m > _EPSILON_EXACT_LIMIT:
        stride = int(np.ceil(m / _EPSILON_EXACT_LIMIT))
        F = F[::stride]
        m = len(F)
    d2 = _sq_dists(F, F)
    iu = np.triu_indices(m, 1)
    return float(np.median(d2[iu]))


def build_kernel(F: np.ndarray, epsilon: float) -> np.ndarray:
    """Gaussian affinity matrix ``exp(-|f_i - f_j|^2 / (2 eps))``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    F = np.asarray(F, dtype=float)
    d2 = _sq_dists(F, F)
    np.fill_diagonal(d2, 0.0)
    A = np.exp(-d2 / (2.0 * epsilon))
    return 0.5 * (A + A.T)


def normalize_kernel(A: np.ndarray, alpha: float = 1.0):
    """Density-normalized row-stochastic matrix.

    Returns ``(W, degrees, row_degrees)`` where ``degrees`` are the kernel row
    sums used in the alpha-normalization and ``row_degrees`` the row sums of
    the alpha-normalized kernel (needed for the symmetric conjugate and for
    out-of-sample rows).
    """
    A = np.asarray(A, dtype=float)
    P = A.sum(axis=1)
    if np.any(P <= 0):
        raise ValueError("zero kernel row degree")
    At = A / (P[:, None] ** alpha * P[None, :] ** alpha)
    d_row = At.sum(axis=1)
    W = At / d_row[:, None]
    return W, P, d_row


def eigendecompose(W: np.ndarray, k: int, sym_weights: np.ndarray):
    """Top-k eigenpairs of the row-stochastic ``W`` via its symmetric conjugate.

    ``sym_weights`` are the row sums of the symmetric kernel underlying ``W``
    (as returned by :func:`normalize_kernel`); the conjugate
    ``D^{1/2} W D^{-1/2}`` is symmetric, so the spectrum is real.  Eigenpairs
    come back sorted by descending eigenvalue, eigenvectors unit-norm with the
    first nonzero component positive.
    """
    m = W.shape[0]
    if k >= m and m > 1:
        raise ValueError("k must be smaller than the number of points")
    k = min(k, m)
    sqrt_d = np.sqrt(np.asarray(sym_weights, dtype=float))
    S = W * (sqrt_d[:, None] / sqrt_d[None, :])
    S = 0.5 * (S + S.T)
    vals, vecs = eigh(S)
    order = np.argsort(vals)[::-1][:k]
    lam = vals[order]
    phi = vecs[:, order] / sqrt_d[:, None]
    phi /= np.linalg.norm(phi, axis=0, keepdims=True)
    for j in range(phi.shape[1]):
        col = phi[:, j]
        nz = np.nonzero(np.abs(col) > 1e-12 * np.abs(col).max())[0]
        if len(nz) and col[nz[0]] < 0:
            phi[:, j] = -col
    return lam, phi


def local_linear_residual(target: np.ndarray, coords: np.ndarray,
                          n_neighbors: int) -> float:
    """Normalized leave-one-out residual of a local linear fit.

    Each point's value is predicted from a Gaussian-weighted linear
    regression on ``coords`` over its ``n_neighbors`` nearest neighbors
    (itself excluded).  Values near 0 mean the target is a function of the
    coordinates (a higher harmonic); near 1 means a new direction.
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    if coords.shape[0] == 1:
        coords = coords.T
    m = len(target)
    n_neighbors = min(n_neighbors, m - 1)
    d2 = _sq_dists(coords, coords)
    np.fill_diagonal(d2, np.inf)
    nb_idx = np.argsort(d2, axis=1)[:, :n_neighbors]
    pred = np.empty(m)
    for i in range(m):
        nb = nb_idx[i]
        scale = d2[i, nb[-1]]
        w = np.exp(-d2[i, nb] / scale) if scale > 0 else np.ones(len(nb))
        X = np.column_stack([np.ones(len(nb)), coords[nb]])
        Xw = X * w[:, None]
        beta = np.linalg.lstsq(X.T @ Xw, Xw.T @ target[nb], rcond=None)[0]
        pred[i] = np.concatenate([[1.0], coords[i]]) @ beta
    return float(np.sqrt(np.sum((target - pred) ** 2) / np.sum(target**2)))


def select_nonharmonic(eigvecs: np.ndarray, eigvals: np.ndarray,
                       threshold: float = NONHARMONIC_THRESHOLD,
                       n_select: int = 2,
                       n_neighbors: int | None = None):
    """Pick eigenvectors that open new directions instead of repeating old ones.

    The first non-trivial eigenvector is always selected.  Each later one is
    regressed locally on the already-selected coordinates; those with residual
    above the threshold are selected until ``n_select`` are chosen.  Returns
    ``(selected_indices, residuals)`` with residuals for every examined index.
    """
    m, k = eigvecs.shape
    if k < 3:
        raise ValueError("need at least 3 eigenvectors to select from")
    if n_neighbors is None:
        n_neighbors = int(np.ceil(m / 10))
    selected = [1]
    residuals = {1: 1.0}
    for j in range(2, k):
        r = local_linear_residual(eigvecs[:, j], eigvecs[:, selected], n_neighbors)
        residuals[j] = r
        if len(selected) < n_select and r > threshold:
            selected.append(j)
    if len(selected) < n_select:
        detail = ", ".join(f"r[{j}]={r:.3f}" for j, r in residuals.items())
        raise ValueError(
            f"only {len(selected)} non-harmonic coordinates found "
            f"(need {n_select}); residuals: {detail}"
        )
    return selected, residuals


@dataclass
class LatentPoint:
    """A point in the selected latent coordinates."""

    phi1: float
    phi2: float
    source: str = "training"

    def __post_init__(self):
        if self.source not in ("training", "restricted", "integrated"):
            raise ValueError(f"unknown latent source {self.source!r}")
        if not (np.isfinite(self.phi1) and np.isfinite(self.phi2)):
            raise ValueError("latent coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.phi1, self.phi2])


@dataclass
class DiffusionMapModel:
    """Fitted latent-coordinate model over a set of training density fields."""

    training_fields: np.ndarray
    epsilon: float
    degrees: np.ndarray
    row_degrees: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    selected: tuple
    alpha: float = 1.0
    fields_hash: str = ""
    selection_residuals: dict = field(default_factory=dict)

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        if np.any(np.diff(lam) > 1e-12):
            raise ValueError("eigenvalues must be sorted descending")
        if np.any(np.abs(lam) > 1.0 + 1e-8):
            raise ValueError("eigenvalues must lie in [-1, 1]")
        if abs(lam[0] - 1.0) > 1e-8:
            raise ValueError("leading eigenvalue must be 1")
        phi0 = self.eigenvectors[:, 0]
        if phi0.std() > 1e-6 * max(abs(phi0.mean()), 1e-300):
            raise ValueError("leading eigenvector must be constant")
        if any(s >= self.eigenvectors.shape[1] for s in self.selected):
            raise ValueError("selected indices out of range")

    # -- construction ------------------------------------------------------

    @classmethod
    def fit(cls, F: np.ndarray, epsilon: float | None = None,
            k: int = DEFAULT_N_EIGENPAIRS, alpha: float = 1.0,
            threshold: float = NONHARMONIC_THRESHOLD,
            select: bool = True) -> "DiffusionMapModel":
        from .io_utils import sha256_array

        F = np.asarray(F, dtype=float)
        if epsilon is None:
            epsilon = choose_epsilon(F)
        A = build_kernel(F, epsilon)
        W, P, d_row = normalize_kernel(A, alpha)
        lam, phi = eigendecompose(W, min(k, len(F) - 1) if len(F) > 1 else 1, d_row)
        if select and phi.shape[1] >= 3:
            sel, residuals = select_nonharmonic(phi, lam, threshold=threshold)
        else:
            sel, residuals = [1, 2] if phi.shape[1] > 2 else [0, 0], {}
        return cls(
            training_fields=F, epsilon=float(epsilon), degrees=P,
            row_degrees=d_row, eigenvalues=lam, eigenvectors=phi,
            selected=tuple(sel), alpha=alpha, fields_hash=sha256_array(F),
            selection_residuals=residuals,
        )

    # -- embedding access ----------------------------------------------------

    @property
    def embedding(self) -> np.ndarray:
        """Training coordinates in the selected eigenvector pair, (M, 2)."""
        return self.eigenvectors[:, list(self.selected)]

    def restrict_coords(self, f_new: np.ndarray,
                        indices=None) -> np.ndarray:
        """Out-of-sample eigenvector values for one field or a batch.

        Applies the training normalizations to the new kernel row and divides
        by the eigenvalues.  Eigenvalues below the extension floor raise.
        """
        idx = list(self.selected) if indices is None else list(indices)
        lam = self.eigenvalues[idx]
        if np.any(np.abs(lam) < MIN_EXTENSION_EIGENVALUE):
            bad = [i for i, l in zip(idx, lam) if abs(l) < MIN_EXTENSION_EIGENVALUE]
            raise ValueError(f"eigenvalues too small for extension at indices {bad}")
        f = np.atleast_2d(np.asarray(f_new, dtype=float))
        d2 = _sq_dists(f, self.training_fields)
        a = np.exp(-d2 / (2.0 * self.epsilon))
        p_new = a.sum(axis=1)
        if np.any(p_new <= 0):
            raise ValueError("new point has zero kernel degree")
        at = a / (p_new[:, None] ** self.alpha * self.degrees[None, :] ** self.alpha)
        w = at / at.sum(axis=1, keepdims=True)
        coords = (w @ self.eigenvectors[:, idx]) / lam[None, :]
        return coords[0] if np.asarray(f_new).ndim == 1 else coords

    def restrict(self, f_new: np.ndarray) -> LatentPoint:
        phi = self.restrict_coords(f_new)
        return LatentPoint(float(phi[0]), float(phi[1]), source="restricted")


def nystrom_restrict(model: DiffusionMapModel, f_new: np.ndarray) -> LatentPoint:
    """Embed one new density field into the model's selected coordinates."""
    return model.restrict(f_new)


def lift_nearest(model: DiffusionMapModel, q, configs):
    """Training configuration whose embedding is closest to the query point.

    Ties break toward the lowest training index.  ``configs`` must be indexed
    like the model's training fields.
    """
    configs = list(configs)
    if not configs:
        raise ValueError("empty training configuration set")
    if len(configs) != len(model.training_fields):
        raise ValueError("configs must match the training set one-to-one")
    qv = q.as_array() if isinstance(q, LatentPoint) else np.asarray(q, dtype=float)
    d2 = ((model.embedding - qv[None, :]) ** 2).sum(axis=1)
    return configs[int(np.argmin(d2))]


def save_model(model: DiffusionMapModel, path) -> None:
    from .io_utils import save_archive

    save_archive(
        path,
        arrays={
            "training_fields": model.training_fields,
            "degrees": model.degrees,
            "row_degrees": model.row_degrees,
            "eigenvalues": model.eigenvalues,
            "eigenvectors": model.eigenvectors,
            "selected": np.array(model.selected, dtype=np.int64),
        },
        meta={
            "kind": "diffusion_map_model",
            "epsilon": model.epsilon,
            "alpha": model.alpha,
            "fields_hash": model.fields_hash,
            "selection_residuals": {str(k): v for k, v in
                                    model.selection_residuals.items()},
        },
    )


def load_model(path) -> DiffusionMapModel:
    from .io_utils import load_archive

    arrays, meta = load_archive(path)
    if meta.get("kind") != "diffusion_map_model":
        raise ValueError(f"{path} is not a diffusion map model archive")
    return DiffusionMapModel(
        training_fields=arrays["training_fields"],
        epsilon=float(meta["epsilon"]),
        degrees=arrays["degrees"],
        row_degrees=arrays["row_degrees"],
        eigenvalues=arrays["eigenvalues"],
        eigenvectors=arrays["eigenvectors"],
        selected=tuple(int(s) for s in arrays["selected"]),
        alpha=float(meta["alpha"]),
        fields_hash=meta.get("fields_hash", ""),
        selection_residuals={int(k): float(v) for k, v in
                             meta.get("selection_residuals", {}).items()},
    )

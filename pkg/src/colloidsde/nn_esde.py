"""Likelihood-trained drift/diffusivity networks for latent dynamics.

Two small dense networks map ``(phi1, phi2, p)`` to a drift vector and to a
lower-triangular noise factor ``L`` (softplus keeps the diagonal strictly
positive, so ``Sigma = h L L^T`` is SPD by construction).  Training minimizes
the Gaussian transition negative log-likelihood of one explicit stochastic
Euler step:

    mean     mu    = x_k + h nu(x_k, p)
    covar    Sigma = h L(x_k, p) L(x_k, p)^T
    loss(pair)     = 1/2 log|det Sigma| + 1/2 (x_kh - mu)^T Sigma^{-1} (x_kh - mu)

averaged over the batch, constant term dropped.  A two-stage protocol first
fits both networks on coarse-step pairs, then freezes the drift and refines
the noise factor on fine-step pairs.

Inputs and coordinates are standardized internally; the standardization is
part of the model and all public evaluations are in data units.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict

import numpy as np

from .km import SnapshotPair
from .mlp import ACTIVATIONS, AdamOptimizer, DenseNet, sigmoid, softplus

_SOFTPLUS_INV_1 = float(np.log(np.expm1(1.0)))  # raw value giving unit diagonal


@dataclass
class TrainConfig:
    epochs_stage1: int = 200
    epochs_stage2: int = 1000
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    zscore_threshold: float = 3.0
    validation_fraction: float = 0.1
    lr_decay: float = 0.1  # final lr as a fraction of the initial one

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        for name in ("epochs_stage1", "epochs_stage2", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def config_hash(self) -> str:
        payload = repr(sorted(asdict(self).items())).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


class MLPModel:
    """Drift net + noise-factor net with shared input standardization."""

    def __init__(self, drift_net: DenseNet, diff_net: DenseNet,
                 in_mean=None, in_scale=None):
        self.drift_net = drift_net
        self.diff_net = diff_net
        self.drift_trainable = True
        self.diff_trainable = True
        self.in_mean = np.zeros(3) if in_mean is None else np.asarray(in_mean, float)
        self.in_scale = np.ones(3) if in_scale is None else np.asarray(in_scale, float)
        self.train_manifest: dict = {}

    # -- construction --------------------------------------------------------

    @classmethod
    def create(cls, seed: int = 0, hidden_layers: int = 4, hidden_units: int = 25,
               drift_activation: str = "relu",
               diff_activation: str = "softplus") -> "MLPModel":
        """Fixed-parameter default architecture."""
        rng = np.random.default_rng(seed)
        hidden = [hidden_units] * hidden_layers
        drift = DenseNet([3] + hidden + [2], drift_activation, rng)
        diff = DenseNet([3] + hidden + [3], diff_activation, rng)
        return cls(drift, diff)

    @classmethod
    def create_parametric(cls, seed: int = 0, hidden_layers: int = 5,
                          hidden_units: int = 26,
                          activation: str = "elu") -> "MLPModel":
        """Architecture used when a control parameter is learned jointly."""
        return cls.create(seed, hidden_layers, hidden_units,
                          drift_activation=activation, diff_activation=activation)

    def set_normalization(self, x: np.ndarray, p: np.ndarray) -> None:
        """Fix input standardization from training coordinates and parameters."""
        x = np.atleast_2d(np.asarray(x, float))
        p = np.asarray(p, float).ravel()
        mean = np.array([x[:, 0].mean(), x[:, 1].mean(), p.mean()])
        scale = np.array([x[:, 0].std(), x[:, 1].std(), p.std()])
        scale[scale <= 0] = 1.0
        self.in_mean = mean
        self.in_scale = scale

    # -- forward evaluation ----------------------------------------------------

    def _net_input(self, x: np.ndarray, p) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        pcol = np.broadcast_to(np.asarray(p, float).ravel(), (len(x),)) \
            if np.ndim(p) <= 1 else np.asarray(p, float)
        inp = np.column_stack([x, pcol])
        return (inp - self.in_mean) / self.in_scale

    def _forward_normalized(self, inp_n: np.ndarray):
        """Normalized-space drift and noise-factor entries for a batch."""
        nu_n = self.drift_net.forward(inp_n)
        raw = self.diff_net.forward(inp_n)
        l11 = softplus(raw[:, 0])
        l21 = raw[:, 1]
        l22 = softplus(raw[:, 2])
        return nu_n, raw, l11, l21, l22

    def evaluate_batch(self, x: np.ndarray, p):
        """Data-unit drift vectors and noise factors for a batch of points."""
        inp_n = self._net_input(x, p)
        nu_n, _, l11, l21, l22 = self._forward_normalized(inp_n)
        s = self.in_scale[:2]
        nu = nu_n * s[None, :]
        L = np.zeros((len(inp_n), 2, 2))
        L[:, 0, 0] = l11 * s[0]
        L[:, 1, 0] = l21 * s[1]
        L[:, 1, 1] = l22 * s[1]
        return nu, L

    def evaluate(self, x, p):
        """Drift vector and lower-triangular noise factor at one point."""
        nu, L = self.evaluate_batch(np.atleast_2d(x), p)
        return nu[0], L[0]

    def drift_and_noise(self, x, p):
        return self.evaluate(x, p)

    # -- persistence -----------------------------------------------------------

    def trainable_nets(self):
        nets = []
        if self.drift_trainable:
            nets.append(("drift", self.drift_net))
        if self.diff_trainable:
            nets.append(("diff", self.diff_net))
        return nets


def pairs_to_arrays(pairs):
    """Stack snapshot pairs (or pass arrays through) as (X, Y, H, P)."""
    if isinstance(pairs, tuple) and len(pairs) == 4:
        x, y, h, p = (np.asarray(a, float) for a in pairs)
        return x, y, h, p
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty snapshot-pair set")
    x = np.stack([q.x_k for q in pairs])
    y = np.stack([q.x_kh for q in pairs])
    h = np.array([q.h for q in pairs])
    p = np.array([q.p for q in pairs])
    return x, y, h, p


def remove_outliers(pairs, zscore_threshold: float = 3.0):
    """Drop pairs whose per-dimension displacement z-score exceeds the bound."""
    x, y, h, p = pairs_to_arrays(pairs)
    disp = y - x
    mu = disp.mean(axis=0)
    sd = disp.std(axis=0)
    sd[sd <= 0] = 1.0
    keep = (np.abs((disp - mu) / sd) <= zscore_threshold).all(axis=1)
    return x[keep], y[keep], h[keep], p[keep]


# ---------------------------------------------------------------------------
# loss and gradients
# ---------------------------------------------------------------------------

def _loss_terms_normalized(model: MLPModel, xn, yn, h, pn):
    """Core batched loss pieces in normalized coordinates.

    Returns (loss, cache) where cache carries everything backward needs.
    """
    inp_n = np.column_stack([xn, pn])
    # divergence shows up as non-finite loss and is handled by the caller
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        nu_n, raw, l11, l21, l22 = model._forward_normalized(inp_n)
        r = yn - (xn + h[:, None] * nu_n)
        w1 = r[:, 0] / l11
        w2 = (r[:, 1] - l21 * w1) / l22
        quad = 0.5 * (w1**2 + w2**2) / h
        logdet = np.log(h) + np.log(l11) + np.log(l22)
        loss = float(np.mean(logdet + quad))
    cache = (inp_n, raw, l11, l21, l22, r, w1, w2, h)
    return loss, cache


def _grads_from_cache(model: MLPModel, cache):
    """Backward pass through both networks for the mean batch loss."""
    inp_n, raw, l11, l21, l22, r, w1, w2, h = cache
    b = len(h)
    u2 = w2 / l22
    u1 = (w1 - l21 * u2) / l11
    # d(mean loss)/d nu = -h * Sigma^{-1} r / B with Sigma = h L L^T
    dnu = -np.column_stack([u1, u2]) / b
    g_l11 = (1.0 / l11 - (u1 * w1) / h) / b
    g_l21 = (-(u2 * w1) / h) / b
    g_l22 = (1.0 / l22 - (u2 * w2) / h) / b
    graw = np.column_stack([
        g_l11 * sigmoid(raw[:, 0]),
        g_l21,
        g_l22 * sigmoid(raw[:, 2]),
    ])
    gw_d, gb_d = model.drift_net.backward(dnu)
    gw_s, gb_s = model.diff_net.backward(graw)
    return (gw_d, gb_d), (gw_s, gb_s)


def _normalize_batch(model: MLPModel, x, y, h, p):
    s = model.in_scale
    xn = (x - model.in_mean[:2]) / s[:2]
    yn = (y - model.in_mean[:2]) / s[:2]
    pn = (p - model.in_mean[2]) / s[2]
    return xn, yn, h, pn


def nll_loss(batch, model: MLPModel) -> float:
    """Mean transition negative log-likelihood of the batch, in data units."""
    x, y, h, p = pairs_to_arrays(batch)
    if np.any(h <= 0):
        raise ValueError("all snapshot steps must be positive")
    nu, L = model.evaluate_batch(x, p)
    det = (h * L[:, 0, 0] * L[:, 1, 1]) ** 2
    if np.any(det <= 1e-300):
        raise FloatingPointError("singular transition covariance in loss")
    r = y - (x + h[:, None] * nu)
    w1 = r[:, 0] / L[:, 0, 0]
    w2 = (r[:, 1] - L[:, 1, 0] * w1) / L[:, 1, 1]
    quad = 0.5 * (w1**2 + w2**2) / h
    logdet = 0.5 * np.log(det)
    return float(np.mean(logdet + quad))


def loss_gradient(batch, model: MLPModel) -> np.ndarray:
    """Exact gradient of :func:`nll_loss` over the trainable networks' weights.

    Returns one flat vector, drift network first (weights then biases per
    layer), then the noise network; frozen subnetworks are excluded.
    """
    x, y, h, p = pairs_to_arrays(batch)
    xn, yn, h, pn = _normalize_batch(model, x, y, h, p)
    _, cache = _loss_terms_normalized(model, xn, yn, h, pn)
    (gw_d, gb_d), (gw_s, gb_s) = _grads_from_cache(model, cache)
    parts = []
    if model.drift_trainable:
        parts.extend(g.ravel() for g in gw_d + gb_d)
    if model.diff_trainable:
        parts.extend(g.ravel() for g in gw_s + gb_s)
    if not parts:
        return np.empty(0)
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _train_stage(model: MLPModel, data, cfg: TrainConfig, epochs: int,
                 rng: np.random.Generator, history: list, stage: str) -> None:
    x, y, h, p = data
    xn, yn, h, pn = _normalize_batch(model, x, y, h, p)
    n = len(xn)
    n_val = max(1, int(round(cfg.validation_fraction * n)))
    perm = rng.permutation(n)
    val_idx = perm[:n_val]
    tr_idx = perm[n_val:]
    if len(tr_idx) == 0:
        raise ValueError("training split is empty")

    opts = [AdamOptimizer(net.parameters(), lr=cfg.learning_rate)
            for _, net in model.trainable_nets()]
    names = [name for name, _ in model.trainable_nets()]

    for epoch in range(epochs):
        frac = epoch / max(epochs - 1, 1)
        lr = cfg.learning_rate * (cfg.lr_decay ** frac)
        order = rng.permutation(len(tr_idx))
        epoch_loss = 0.0
        n_batches = 0
        for s in range(0, len(order), cfg.batch_size):
            sel = tr_idx[order[s:s + cfg.batch_size]]
            loss, cache = _loss_terms_normalized(model, xn[sel], yn[sel], h[sel], pn[sel])
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"training diverged (non-finite loss) at {stage} epoch {epoch}"
                )
            grads = _grads_from_cache(model, cache)
            grad_map = {"drift": grads[0][0] + grads[0][1],
                        "diff": grads[1][0] + grads[1][1]}
            for name, opt in zip(names, opts):
                opt.step(grad_map[name], lr=lr)
            epoch_loss += loss
            n_batches += 1
        val_loss, _ = _loss_terms_normalized(
            model, xn[val_idx], yn[val_idx], h[val_idx], pn[val_idx])
        history.append({
            "stage": stage, "epoch": epoch,
            "train_loss": epoch_loss / n_batches, "val_loss": val_loss,
        })


def train_two_stage(pairs_drift, pairs_diff, cfg: TrainConfig,
                    model: MLPModel | None = None):
    """Fit drift on coarse-step pairs, then refine the noise factor.

    Stage 1 trains both networks on the ``pairs_drift`` set; stage 2 freezes
    the drift network and trains the noise network on ``pairs_diff``.
    Outliers are dropped by displacement z-score before each stage.
    Deterministic for a fixed (seed, data order, config).  Returns
    ``(model, history)`` with per-epoch train/validation losses.
    """
    d1 = remove_outliers(pairs_drift, cfg.zscore_threshold)
    d2 = remove_outliers(pairs_diff, cfg.zscore_threshold)
    if len(d1[0]) == 0 or len(d2[0]) == 0:
        raise ValueError("no snapshot pairs left after outlier removal")
    if model is None:
        model = MLPModel.create(seed=cfg.seed)
    x_all = np.vstack([d1[0], d2[0]])
    p_all = np.concatenate([d1[3], d2[3]])
    model.set_normalization(x_all, p_all)

    rng = np.random.default_rng(cfg.seed)
    history: list = []
    model.drift_trainable = True
    model.diff_trainable = True
    _train_stage(model, d1, cfg, cfg.epochs_stage1, rng, history, "drift")
    model.drift_trainable = False
    _train_stage(model, d2, cfg, cfg.epochs_stage2, rng, history, "diffusivity")
    model.drift_trainable = True
    model.train_manifest = {
        "config_hash": cfg.config_hash(), "seed": cfg.seed,
        "n_pairs_stage1": int(len(d1[0])), "n_pairs_stage2": int(len(d2[0])),
    }
    return model, history


# ---------------------------------------------------------------------------
# ensembles and model comparison
# ---------------------------------------------------------------------------

def _sigma_entries(L: np.ndarray):
    """Std-like diagonal entries and the signed off-diagonal covariance."""
    cov = L @ np.swapaxes(L, -1, -2)
    return np.sqrt(cov[..., 0, 0]), np.sqrt(cov[..., 1, 1]), cov[..., 0, 1]


def evaluation_grid(points: np.ndarray, size: int = 20) -> np.ndarray:
    """Regular size x size grid over the bounding box of the points."""
    points = np.asarray(points, float)
    gx = np.linspace(points[:, 0].min(), points[:, 0].max(), size)
    gy = np.linspace(points[:, 1].min(), points[:, 1].max(), size)
    xx, yy = np.meshgrid(gx, gy, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def ensemble_uq(pairs_drift, pairs_diff, cfg: TrainConfig, n_models: int,
                model_factory=None, grid_size: int = 20, p_eval=None):
    """Train an ensemble over independent seeds/resplits and map its spread.

    Every member gets a distinct seed (shifting both its weight init and its
    train/validation split).  Members whose training diverges are recorded
    and excluded.  Returns per-point and per-grid-node mean and standard
    deviation of the drift components and noise entries.
    """
    if n_models < 2:
        raise ValueError("need at least 2 ensemble members")
    x, _, _, p = pairs_to_arrays(pairs_drift)
    grid = evaluation_grid(x, grid_size)
    if p_eval is None:
        p_eval = float(np.mean(p))

    member_fields = []
    failures = []
    for i in range(n_models):
        member_cfg = TrainConfig(**{**asdict(cfg), "seed": cfg.seed + i})
        factory = model_factory or (lambda seed: MLPModel.create(seed=seed))
        try:
            member, _ = train_two_stage(pairs_drift, pairs_diff, member_cfg,
                                        model=factory(member_cfg.seed))
        except RuntimeError as exc:
            failures.append({"member": i, "error": str(exc)})
            continue
        fields = {}
        for tag, pts in (("data", x), ("grid", grid)):
            nu, L = member.evaluate_batch(pts, p_eval)
            s11, s22, s12 = _sigma_entries(L)
            fields[tag] = np.column_stack([nu[:, 0], nu[:, 1], s11, s22, s12])
        member_fields.append(fields)

    if len(member_fields) < 2:
        raise RuntimeError(f"too few ensemble members survived: {failures}")
    out = {"grid": grid, "data_points": x, "failures": failures,
           "n_members": len(member_fields), "columns":
           ["nu1", "nu2", "sigma11", "sigma22", "sigma12"]}
    for tag in ("data", "grid"):
        stack = np.stack([m[tag] for m in member_fields])
        out[f"{tag}_mean"] = stack.mean(axis=0)
        out[f"{tag}_std"] = stack.std(axis=0)
    return out


def compare_models(model_a, model_b, grid: np.ndarray, p=0.0):
    """Per-node absolute coefficient differences and their means.

    Works for any pair of models exposing ``drift_and_noise``; the noise is
    compared through the std-like diagonal entries of its covariance.
    """
    grid = np.atleast_2d(np.asarray(grid, float))
    cols = {"nu1": [], "nu2": [], "sigma11": [], "sigma22": []}
    for node in grid:
        va = _model_coeffs(model_a, node, p)
        vb = _model_coeffs(model_b, node, p)
        for key in cols:
            cols[key].append(abs(va[key] - vb[key]))
    diffs = {k: np.array(v) for k, v in cols.items()}
    means = {k: float(v.mean()) for k, v in diffs.items()}
    return {"grid": grid, "diffs": diffs, "means": means}


def _model_coeffs(model, x, p):
    nu, L = model.drift_and_noise(np.asarray(x, float), p)
    cov = L @ L.T
    return {"nu1": float(nu[0]), "nu2": float(nu[1]),
            "sigma11": float(np.sqrt(cov[0, 0])),
            "sigma22": float(np.sqrt(cov[1, 1]))}


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_model(path, model: MLPModel) -> None:
    from .io_utils import save_archive

    arrays = {
        "in_mean": model.in_mean,
        "in_scale": model.in_scale,
    }
    for tag, net in (("drift", model.drift_net), ("diff", model.diff_net)):
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            arrays[f"{tag}_w{i}"] = w
            arrays[f"{tag}_b{i}"] = b
    save_archive(path, arrays, meta={
        "kind": "mlp_esde_model",
        "version": 1,
        "drift_layers": model.drift_net.layer_sizes,
        "diff_layers": model.diff_net.layer_sizes,
        "drift_activation": model.drift_net.activation,
        "diff_activation": model.diff_net.activation,
        "train_manifest": model.train_manifest,
    })


def load_model(path) -> MLPModel:
    from .io_utils import load_archive

    arrays, meta = load_archive(path)
    if meta.get("kind") != "mlp_esde_model":
        raise ValueError(f"{path} is not an eSDE model archive")
    rng = np.random.default_rng(0)
    drift = DenseNet(meta["drift_layers"], meta["drift_activation"], rng)
    diff = DenseNet(meta["diff_layers"], meta["diff_activation"], rng)
    for tag, net in (("drift", drift), ("diff", diff)):
        for i in range(len(net.weights)):
            net.weights[i] = arrays[f"{tag}_w{i}"]
            net.biases[i] = arrays[f"{tag}_b{i}"]
    model = MLPModel(drift, diff, arrays["in_mean"], arrays["in_scale"])
    model.train_manifest = meta.get("train_manifest", {})
    return model

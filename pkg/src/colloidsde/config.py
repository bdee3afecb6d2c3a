"""Flat key=value configuration for the batch pipeline.

Every key has a default and a one-line description; `config_reference()`
renders the full list (the README embeds it).  Lists are comma-separated.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

# key -> (default, description)
CONFIG_DOC = {
    "voltages": ([0.5, 0.6, 0.7, 0.8], "normalized voltages V* to sample"),
    "n_particles": (30, "particles per configuration"),
    "radius_a_nm": (1400.0, "particle radius in nm"),
    "kappa_inv_nm": (100.0, "Debye screening length in nm (10 at full scale)"),
    "b_pp_kt": (3216.5, "electrostatic repulsion prefactor in kT"),
    "f_cm": (-0.4667, "Clausius-Mossotti factor"),
    "d_g_nm": (1.0e5, "electrode gap in nm"),
    "eps_m": (80.1, "medium relative dielectric constant"),
    "temperature_c": (20.0, "medium temperature in Celsius"),
    "dt": (5e-4, "integrator step, reduced time units"),
    "horizon": (14.0, "trajectory length, reduced time units"),
    "save_interval": (0.08, "frame spacing, reduced time units"),
    "n_trajectories": (30, "trajectories per voltage"),
    "init_disc_radius": (12.5, "initial-placement disc radius, units of a"),
    "init_min_separation": (2.9, "initial minimum pair distance, units of a"),
    "rg_discard_ratio": (1.39, "discard frames with rg above ratio * reference rg"),
    "subsample_target": (2400, "corpus size after histogram subsampling"),
    "subsample_bins": (20, "bins per axis of the (rg, psi6) histogram"),
    "neighbor_cutoff": (3.4, "order-parameter neighbor cutoff, units of a"),
    "coherence_threshold": (0.32, "bond-coherence threshold for c6"),
    "grid_size": (64, "density raster size G (G x G nodes)"),
    "grid_dilation": (1.5, "reference bounding-box dilation for the grid"),
    "dmaps_k": (10, "number of eigenpairs to compute"),
    "dmaps_epsilon": (0.0, "kernel scale; 0 selects the median heuristic"),
    "nonharmonic_threshold": (0.5, "residual threshold for coordinate selection"),
    "km_voltage": (0.8, "voltage for the fixed-voltage estimators"),
    "km_anchors": (150, "anchor count for the burst-moment field"),
    "km_replicas": (24, "burst replicas per anchor"),
    "burst_h_frames": (0.125, "burst duration in frame units"),
    "h_drift_frames": (1.0, "coarse snapshot step (frame units) for drift fitting"),
    "fit_all_voltages": (False, "fit fixed-voltage estimators at every voltage"),
    "epochs_stage1": (150, "training epochs for the joint stage"),
    "epochs_stage2": (120, "training epochs for the noise refinement stage"),
    "batch_size": (32, "training batch size"),
    "learning_rate": (3e-3, "initial learning rate"),
    "lr_decay": (0.1, "final/initial learning-rate ratio"),
    "zscore_threshold": (3.0, "displacement z-score bound for outlier removal"),
    "validation_fraction": (0.1, "validation share of the training pairs"),
    "n_compare_paths": (100, "paths per model in trajectory comparisons"),
    "compare_steps": (100, "integration steps in trajectory comparisons"),
    "uq_models": (20, "ensemble size for uncertainty maps"),
    "potential_grid": (20, "free-energy grid size per axis"),
    "potential_substeps": (200, "midpoint substeps of the potential line integral"),
    "integrate_h": (0.125, "default step for standalone latent integration"),
    "integrate_steps": (1000, "default step count for standalone integration"),
    "seed": (0, "master seed"),
}


def _default_for(key):
    val = CONFIG_DOC[key][0]
    return field(default_factory=(lambda v=val: list(v))) if isinstance(val, list) \
        else val


@dataclass
class PipelineConfig:
    voltages: list = _default_for("voltages")
    n_particles: int = _default_for("n_particles")
    radius_a_nm: float = _default_for("radius_a_nm")
    kappa_inv_nm: float = _default_for("kappa_inv_nm")
    b_pp_kt: float = _default_for("b_pp_kt")
    f_cm: float = _default_for("f_cm")
    d_g_nm: float = _default_for("d_g_nm")
    eps_m: float = _default_for("eps_m")
    temperature_c: float = _default_for("temperature_c")
    dt: float = _default_for("dt")
    horizon: float = _default_for("horizon")
    save_interval: float = _default_for("save_interval")
    n_trajectories: int = _default_for("n_trajectories")
    init_disc_radius: float = _default_for("init_disc_radius")
    init_min_separation: float = _default_for("init_min_separation")
    rg_discard_ratio: float = _default_for("rg_discard_ratio")
    subsample_target: int = _default_for("subsample_target")
    subsample_bins: int = _default_for("subsample_bins")
    neighbor_cutoff: float = _default_for("neighbor_cutoff")
    coherence_threshold: float = _default_for("coherence_threshold")
    grid_size: int = _default_for("grid_size")
    grid_dilation: float = _default_for("grid_dilation")
    dmaps_k: int = _default_for("dmaps_k")
    dmaps_epsilon: float = _default_for("dmaps_epsilon")
    nonharmonic_threshold: float = _default_for("nonharmonic_threshold")
    km_voltage: float = _default_for("km_voltage")
    km_anchors: int = _default_for("km_anchors")
    km_replicas: int = _default_for("km_replicas")
    burst_h_frames: float = _default_for("burst_h_frames")
    h_drift_frames: float = _default_for("h_drift_frames")
    fit_all_voltages: bool = _default_for("fit_all_voltages")
    epochs_stage1: int = _default_for("epochs_stage1")
    epochs_stage2: int = _default_for("epochs_stage2")
    batch_size: int = _default_for("batch_size")
    learning_rate: float = _default_for("learning_rate")
    lr_decay: float = _default_for("lr_decay")
    zscore_threshold: float = _default_for("zscore_threshold")
    validation_fraction: float = _default_for("validation_fraction")
    n_compare_paths: int = _default_for("n_compare_paths")
    compare_steps: int = _default_for("compare_steps")
    uq_models: int = _default_for("uq_models")
    potential_grid: int = _default_for("potential_grid")
    potential_substeps: int = _default_for("potential_substeps")
    integrate_h: float = _default_for("integrate_h")
    integrate_steps: int = _default_for("integrate_steps")
    seed: int = _default_for("seed")

    def __post_init__(self):
        if not self.voltages:
            raise ValueError("at least one voltage is required")
        for name in ("rg_discard_ratio", "dt", "horizon", "save_interval"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def config_hash(self) -> str:
        payload = repr(sorted(
            (f.name, getattr(self, f.name)) for f in fields(self))).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def physical_params(self, v_star: float):
        from .bd import PhysicalParams

        return PhysicalParams(
            n_particles=self.n_particles, radius_a=self.radius_a_nm,
            f_cm=self.f_cm, kappa_inv=self.kappa_inv_nm, B_pp=self.b_pp_kt,
            V_star=v_star, d_g=self.d_g_nm, eps_m=self.eps_m,
            temperature_c=self.temperature_c,
        )

    def train_config(self, seed_offset: int = 0):
        from .nn_esde import TrainConfig

        return TrainConfig(
            epochs_stage1=self.epochs_stage1, epochs_stage2=self.epochs_stage2,
            batch_size=self.batch_size, learning_rate=self.learning_rate,
            seed=self.seed + seed_offset, zscore_threshold=self.zscore_threshold,
            validation_fraction=self.validation_fraction, lr_decay=self.lr_decay,
        )


def _parse_value(key: str, text: str):
    default = CONFIG_DOC[key][0]
    text = text.strip()
    if isinstance(default, list):
        return [float(tok) for tok in text.replace(",", " ").split()]
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean {key} = {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read a flat ``key = value`` file; unknown keys are an error."""
    values = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, text = (s.strip() for s in stripped.split("=", 1))
            if key not in CONFIG_DOC:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, text)
    if overrides:
        for key, val in overrides.items():
            if key not in CONFIG_DOC:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = val
    return PipelineConfig(**values)


def config_reference() -> str:
    lines = ["key | default | description", "--- | --- | ---"]
    for key, (default, doc) in CONFIG_DOC.items():
        shown = ",".join(str(v) for v in default) if isinstance(default, list) \
            else default
        lines.append(f"{key} | {shown} | {doc}")
    return "\n".join(lines)


def write_config(path, cfg: PipelineConfig) -> None:
    lines = []
    for key in CONFIG_DOC:
        val = getattr(cfg, key)
        shown = ",".join(repr(v) for v in val) if isinstance(val, list) else repr(val)
        lines.append(f"{key} = {shown}")
    Path(path).write_text("\n".join(lines) + "\n")

"""End-to-end orchestration: sampling, fitting, comparison, report emission.

Each stage reads its inputs from and writes its artifacts into one output
directory, so every stage is rerunnable in isolation; identical seeds and
configuration reproduce identical artifact bytes.  Stage order for a full
run: simulate, order-params, featurize, dmaps, restrict, fit-km, fit-nn,
integrate, free-energy, compare, uq, report.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .bd import ParticleConfiguration, burst, random_disc_configuration, simulate, total_forces
from .config import PipelineConfig, write_config
from .dmaps import DiffusionMapModel, lift_nearest, load_model as load_dmap, save_model as save_dmap
from .featurize import (GridSpec, align_to_reference, canonical_order, center,
                        ingest_external, kde_density, reference_grid, select_reference)
from .free_energy import (boundary_loop_residue, divergence_drift_ratio,
                          effective_potential, save_potential)
from .io_utils import (read_table, read_trajectory, sha256_file,
                       write_table, write_trajectory, save_archive, load_archive)
from .km import TabulatedModel, em_integrate, km_point_estimate, load_tabulated, save_tabulated
from .nn_esde import (MLPModel, compare_models, ensemble_uq, evaluation_grid,
                      load_model as load_nn, save_model as save_nn, train_two_stage)
from .order_params import c6_ensemble, psi6_global, radius_of_gyration


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _voltage_tag(v: float) -> str:
    return f"v{v:g}".replace(".", "p")


def update_manifest(out: Path, cfg: PipelineConfig, stage: str, paths) -> None:
    """Record stage artifacts (hashes) in the run manifest."""
    manifest_path = out / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {
        "config_hash": cfg.config_hash(), "seed": cfg.seed,
        "version": __version__, "artifacts": {}, "stages": {},
    }
    for p in paths:
        rel = str(Path(p).relative_to(out))
        manifest["artifacts"][rel] = sha256_file(p)
    manifest["stages"][stage] = {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# simulate + order parameters
# ---------------------------------------------------------------------------

def stage_simulate(cfg: PipelineConfig, out: Path) -> list:
    """Seeded trajectories for every voltage; one text file each."""
    out = Path(out)
    written = []
    cfg_path = out / "config.txt"
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg_path, cfg)
    written.append(cfg_path)
    for vi, v in enumerate(cfg.voltages):
        params = cfg.physical_params(v)
        vdir = out / "trajectories" / _voltage_tag(v)
        vdir.mkdir(parents=True, exist_ok=True)
        for j in range(cfg.n_trajectories):
            rng = np.random.default_rng([cfg.seed, vi, j])
            c0 = random_disc_configuration(
                rng, cfg.n_particles, cfg.init_disc_radius,
                cfg.init_min_separation, params_ref=params.params_hash())
            traj = simulate(c0, cfg.horizon, cfg.dt, cfg.save_interval, rng, params)
            path = vdir / f"traj_{j:04d}.txt"
            write_trajectory(path, traj, cfg.dt, params.params_hash())
            written.append(path)
    update_manifest(out, cfg, "simulate", written)
    return written


def load_trajectories(cfg: PipelineConfig, out: Path) -> dict:
    trajs = {}
    for v in cfg.voltages:
        vdir = Path(out) / "trajectories" / _voltage_tag(v)
        trajs[v] = [read_trajectory(p) for p in sorted(vdir.glob("traj_*.txt"))]
        if not trajs[v]:
            raise FileNotFoundError(f"no trajectories for voltage {v} in {vdir}")
    return trajs


def stage_order_params(cfg: PipelineConfig, out: Path) -> Path:
    """(voltage, trajectory, frame) -> rg, psi6, c6 table over all frames."""
    out = Path(out)
    trajs = load_trajectories(cfg, out)
    rows = {k: [] for k in ("voltage", "traj", "frame", "time", "rg", "psi6", "c6")}
    for v in cfg.voltages:
        for j, traj in enumerate(trajs[v]):
            for k, frame in enumerate(traj.frames):
                rows["voltage"].append(v)
                rows["traj"].append(j)
                rows["frame"].append(k)
                rows["time"].append(frame.time)
                rows["rg"].append(radius_of_gyration(frame))
                rows["psi6"].append(psi6_global(frame, cfg.neighbor_cutoff))
                rows["c6"].append(c6_ensemble(frame, cfg.neighbor_cutoff,
                                              cfg.coherence_threshold))
    path = out / "order_params.txt"
    write_table(path, rows, comment="order parameters per saved frame")
    update_manifest(out, cfg, "order-params", [path])
    return path


# ---------------------------------------------------------------------------
# featurize
# ---------------------------------------------------------------------------

def subsample_uniform(rg: np.ndarray, psi6: np.ndarray, target: int, bins: int):
    """Indices after greedy per-bin capping of the (rg, psi6) histogram.

    The cap is the smallest count at which capped bins still reach the
    target; within a bin the lowest original indices win.  No bin ever
    exceeds the cap.
    """
    n = len(rg)
    if n <= target:
        return np.arange(n), n
    rg_edges = np.linspace(rg.min(), rg.max() + 1e-12, bins + 1)
    ps_edges = np.linspace(psi6.min(), psi6.max() + 1e-12, bins + 1)
    bx = np.clip(np.digitize(rg, rg_edges) - 1, 0, bins - 1)
    by = np.clip(np.digitize(psi6, ps_edges) - 1, 0, bins - 1)
    flat = bx * bins + by
    groups = {}
    for i, b in enumerate(flat):
        groups.setdefault(int(b), []).append(i)
    counts = np.array([len(g) for g in groups.values()])

    def kept_at(cap):
        return int(np.minimum(counts, cap).sum())

    lo, hi = 1, int(counts.max())
    while lo < hi:
        mid = (lo + hi) // 2
        if kept_at(mid) >= target:
            hi = mid
        else:
            lo = mid + 1
    cap = lo
    chosen = []
    for g in groups.values():
        chosen.extend(g[:cap])
    return np.array(sorted(chosen)), cap


def featurize_frames(frames, ref_sorted: np.ndarray, grid: GridSpec):
    """Density fields for many configurations; out-of-grid frames are skipped.

    Returns (fields, kept_index) where ``kept_index`` maps rows of ``fields``
    back into ``frames``.
    """
    fields = []
    kept = []
    for i, frame in enumerate(frames):
        try:
            aligned = align_to_reference(frame, ref_sorted)
            fields.append(kde_density(aligned.positions, grid).flat())
        except ValueError:
            continue
        kept.append(i)
    if not fields:
        return np.empty((0, grid.size**2)), np.array([], dtype=int)
    return np.array(fields), np.array(kept, dtype=int)


def stage_featurize(cfg: PipelineConfig, out: Path) -> Path:
    """Reference selection, rg filtering, histogram subsampling, KDE corpus."""
    out = Path(out)
    trajs = load_trajectories(cfg, out)
    names, data = read_table(out / "order_params.txt")
    col = {name: data[:, i] for i, name in enumerate(names)}

    ref_row = int(np.argmin(col["rg"]))
    rg_ref = col["rg"][ref_row]
    v_ref = col["voltage"][ref_row]
    ref_frame = trajs[v_ref][int(col["traj"][ref_row])].frames[int(col["frame"][ref_row])]
    ref_sorted = canonical_order(center(ref_frame).positions)
    grid = reference_grid(ref_sorted, cfg.grid_size, cfg.grid_dilation)

    keep = col["rg"] <= cfg.rg_discard_ratio * rg_ref
    kept_idx = np.where(keep)[0]
    if len(kept_idx) == 0:
        raise RuntimeError("empty corpus: every frame exceeded the rg threshold")
    sub_rel, cap = subsample_uniform(
        col["rg"][kept_idx], col["psi6"][kept_idx],
        cfg.subsample_target, cfg.subsample_bins)
    chosen = kept_idx[sub_rel]

    frames = [trajs[col["voltage"][i]][int(col["traj"][i])].frames[int(col["frame"][i])]
              for i in chosen]
    fields, feat_kept = featurize_frames(frames, ref_sorted, grid)
    chosen = chosen[feat_kept]
    index = np.column_stack([
        col["voltage"][chosen], col["traj"][chosen], col["frame"][chosen],
        col["rg"][chosen], col["psi6"][chosen], col["c6"][chosen],
    ])
    path = out / "corpus.npz"
    save_archive(path, arrays={
        "fields": fields, "index": index, "reference": ref_sorted,
    }, meta={
        "kind": "density_corpus", "grid_bounds": list(grid.bounds),
        "grid_size": grid.size, "rg_ref": float(rg_ref),
        "subsample_cap": int(cap),
        "index_columns": ["voltage", "traj", "frame", "rg", "psi6", "c6"],
    })
    update_manifest(out, cfg, "featurize", [path])
    return path


def load_corpus(out: Path):
    arrays, meta = load_archive(Path(out) / "corpus.npz")
    grid = GridSpec(tuple(meta["grid_bounds"]), meta["grid_size"])
    return arrays["fields"], arrays["index"], arrays["reference"], grid, meta


# ---------------------------------------------------------------------------
# diffusion maps
# ---------------------------------------------------------------------------

def stage_dmaps(cfg: PipelineConfig, out: Path) -> Path:
    out = Path(out)
    fields, index, _, _, _ = load_corpus(out)
    epsilon = cfg.dmaps_epsilon if cfg.dmaps_epsilon > 0 else None
    model = DiffusionMapModel.fit(fields, epsilon=epsilon, k=cfg.dmaps_k,
                                  threshold=cfg.nonharmonic_threshold)
    model_path = out / "dmaps_model.npz"
    save_dmap(model, model_path)
    emb = model.embedding
    emb_path = out / "embedding.txt"
    write_table(emb_path, {
        "id": np.arange(len(emb)), "phi1": emb[:, 0], "phi2": emb[:, 1],
        "rg": index[:, 3], "psi6": index[:, 4], "c6": index[:, 5],
        "voltage": index[:, 0],
    }, comment="latent training coordinates colored by order parameters")
    update_manifest(out, cfg, "dmaps", [model_path, emb_path])
    return model_path


def restrict_trajectory(traj, model: DiffusionMapModel, ref_sorted, grid,
                        rg_max: float):
    """Latent path of one trajectory; returns (frame_idx, times, coords)."""
    frames = []
    idxs = []
    for k, frame in enumerate(traj.frames):
        if radius_of_gyration(frame) > rg_max:
            continue
        frames.append(frame)
        idxs.append(k)
    fields, kept = featurize_frames(frames, ref_sorted, grid)
    if len(kept) == 0:
        return np.array([], dtype=int), np.array([]), np.empty((0, 2))
    coords = model.restrict_coords(fields)
    idxs = np.array(idxs, dtype=int)[kept]
    times = np.array([traj.frames[i].time for i in idxs])
    return idxs, times, coords


def stage_restrict(cfg: PipelineConfig, out: Path) -> list:
    """Restrict every trajectory into the latent coordinates."""
    out = Path(out)
    trajs = load_trajectories(cfg, out)
    fields, index, ref_sorted, grid, meta = load_corpus(out)
    model = load_dmap(out / "dmaps_model.npz")
    rg_max = cfg.rg_discard_ratio * meta["rg_ref"]
    written = []
    for v in cfg.voltages:
        vdir = out / "restricted" / _voltage_tag(v)
        vdir.mkdir(parents=True, exist_ok=True)
        for j, traj in enumerate(trajs[v]):
            idxs, times, coords = restrict_trajectory(traj, model, ref_sorted,
                                                      grid, rg_max)
            path = vdir / f"traj_{j:04d}.txt"
            write_table(path, {
                "frame": idxs, "time": times,
                "phi1": coords[:, 0] if len(coords) else np.array([]),
                "phi2": coords[:, 1] if len(coords) else np.array([]),
            }, comment="restricted latent path")
            written.append(path)
    update_manifest(out, cfg, "restrict", written)
    return written


def stage_restrict_external(cfg: PipelineConfig, out: Path, external_paths) -> list:
    """Restrict externally supplied trajectories and roll the model alongside.

    External frames are rescaled through the ratio of reference radii of
    gyration, aligned to their own reference, rasterized on the training
    grid, and embedded; the parametric model (or the fixed one) is then
    integrated for the same duration and step for comparison.
    """
    out = Path(out)
    fields, index, ref_sorted, grid, meta = load_corpus(out)
    model = load_dmap(out / "dmaps_model.npz")
    ref_rg = radius_of_gyration(ref_sorted)
    nn_path = out / "nn_param_model.npz"
    if not nn_path.exists():
        nn_path = out / f"nn_model_{_voltage_tag(cfg.km_voltage)}.npz"
    nn = load_nn(nn_path) if nn_path.exists() else None
    written = []
    for epath in external_paths:
        frames = ingest_external(epath, reference_rg=ref_rg)
        ext_ref = select_reference(frames)
        ext_sorted = canonical_order(center(ext_ref).positions)
        ffields, kept = featurize_frames(frames, ext_sorted, grid)
        if len(kept) == 0:
            raise RuntimeError(f"no external frame of {epath} fits the grid")
        coords = model.restrict_coords(ffields)
        times = np.array([frames[i].time for i in kept])
        tag = Path(epath).stem
        path = out / f"external_restricted_{tag}.txt"
        write_table(path, {
            "frame": kept, "time": times,
            "phi1": coords[:, 0], "phi2": coords[:, 1],
        }, comment="restricted external trajectory")
        written.append(path)
        if nn is not None:
            h = cfg.integrate_h
            n_steps = max(int(round((len(kept) - 1) * 1.0 / h)), 1)
            rng = np.random.default_rng([cfg.seed, 977, len(written)])
            rollout = em_integrate(nn, coords[0], h, n_steps, rng,
                                   p=float(np.mean(cfg.voltages)))
            rpath = out / f"external_rollout_{tag}.txt"
            write_table(rpath, {
                "step": np.arange(n_steps + 1),
                "time_frames": np.arange(n_steps + 1) * h,
                "phi1": rollout[:, 0], "phi2": rollout[:, 1],
            }, comment="matched latent rollout for the external path")
            written.append(rpath)
    update_manifest(out, cfg, "restrict-external", written)
    return written


# ---------------------------------------------------------------------------
# estimator fitting
# ---------------------------------------------------------------------------

def _anchor_rows_for_voltage(index: np.ndarray, v: float, n_anchors: int):
    rows = np.where(np.isclose(index[:, 0], v))[0]
    if len(rows) == 0:
        raise RuntimeError(f"no corpus entries at voltage {v}")
    if len(rows) > n_anchors:
        stride = len(rows) / n_anchors
        rows = rows[(np.arange(n_anchors) * stride).astype(int)]
    return rows


def stage_fit_km(cfg: PipelineConfig, out: Path) -> list:
    """Burst the anchors, restrict endpoints, tabulate the moment field.

    Burst endpoint embeddings are also saved per voltage; the network's
    noise-refinement stage trains on them.
    """
    out = Path(out)
    trajs = load_trajectories(cfg, out)
    fields, index, ref_sorted, grid, meta = load_corpus(out)
    dmap = load_dmap(out / "dmaps_model.npz")
    h_time = cfg.burst_h_frames * cfg.save_interval
    written = []
    km_voltages = cfg.voltages if cfg.fit_all_voltages else [cfg.km_voltage]
    for vi, v in enumerate(cfg.voltages):
        params = cfg.physical_params(v)
        rows = _anchor_rows_for_voltage(index, v, cfg.km_anchors)
        anchors_latent = dmap.embedding[rows]
        end_coords = []
        end_anchor = []
        min_survivors = max(2, cfg.km_replicas // 2)
        for a, row in enumerate(rows):
            tj, fk = int(index[row, 1]), int(index[row, 2])
            frame = trajs[v][tj].frames[fk]
            rng = np.random.default_rng([cfg.seed, 31, vi, a])
            try:
                ends = burst(frame, cfg.km_replicas, h_time, cfg.dt, rng, params)
                efields, kept = featurize_frames(ends, ref_sorted, grid)
                # endpoints that wander off the raster are dropped; the local
                # moments come from the survivors as long as most remain
                if len(kept) < min_survivors:
                    raise ValueError(
                        f"only {len(kept)}/{cfg.km_replicas} endpoints stayed "
                        "on the grid")
                coords = dmap.restrict_coords(efields)
            except Exception as exc:
                raise RuntimeError(f"burst failed at anchor {a} "
                                   f"(voltage {v}): {exc}") from exc
            end_coords.append(coords)
            end_anchor.extend([a] * len(coords))
        endpoints_latent = np.vstack(end_coords)
        endpoint_anchor = np.array(end_anchor, dtype=np.int64)
        bpath = out / f"bursts_{_voltage_tag(v)}.npz"
        save_archive(bpath, arrays={
            "anchors": anchors_latent, "endpoints": endpoints_latent,
            "endpoint_anchor": endpoint_anchor,
        }, meta={"kind": "latent_bursts", "h_frames": cfg.burst_h_frames,
                 "voltage": v})
        written.append(bpath)
        if v in km_voltages:
            drift = np.empty_like(anchors_latent)
            sigma = np.empty_like(anchors_latent)
            for a in range(len(rows)):
                sel = endpoint_anchor == a
                drift[a], sigma[a] = km_point_estimate(
                    endpoints_latent[sel], anchors_latent[a], cfg.burst_h_frames)
            kpath = out / f"km_model_{_voltage_tag(v)}.txt"
            save_tabulated(kpath, TabulatedModel(anchors_latent, drift, sigma))
            written.append(kpath)
    update_manifest(out, cfg, "fit-km", written)
    return written


def extract_drift_pairs(cfg: PipelineConfig, out: Path, voltages=None):
    """Consecutive-frame snapshot pairs from the restricted trajectories."""
    out = Path(out)
    xs, ys, hs, ps = [], [], [], []
    step = int(round(cfg.h_drift_frames))
    for v in (voltages or cfg.voltages):
        vdir = out / "restricted" / _voltage_tag(v)
        for path in sorted(vdir.glob("traj_*.txt")):
            _, data = read_table(path)
            if len(data) < 2:
                continue
            frame_idx = data[:, 0].astype(int)
            coords = data[:, 2:4]
            pos = {f: i for i, f in enumerate(frame_idx)}
            for f, i in pos.items():
                if f + step in pos:
                    xs.append(coords[i])
                    ys.append(coords[pos[f + step]])
                    hs.append(float(cfg.h_drift_frames))
                    ps.append(v)
    if not xs:
        raise RuntimeError("no drift snapshot pairs could be extracted")
    return np.array(xs), np.array(ys), np.array(hs), np.array(ps)


def load_burst_pairs(cfg: PipelineConfig, out: Path, voltages=None):
    """Anchor-to-endpoint pairs from the saved bursts (fine-step snapshots)."""
    xs, ys, hs, ps = [], [], [], []
    for v in (voltages or cfg.voltages):
        bpath = Path(out) / f"bursts_{_voltage_tag(v)}.npz"
        if not bpath.exists():
            raise FileNotFoundError(f"{bpath} missing; run fit-km first")
        arrays, meta = load_archive(bpath)
        anchors, endpoints = arrays["anchors"], arrays["endpoints"]
        anchor_of = arrays["endpoint_anchor"]
        h = float(meta["h_frames"])
        xs.append(anchors[anchor_of])
        ys.append(endpoints)
        hs.append(np.full(len(endpoints), h))
        ps.append(np.full(len(endpoints), v))
    return (np.vstack(xs), np.vstack(ys),
            np.concatenate(hs), np.concatenate(ps))


def _write_history(path, history):
    write_table(path, {
        "stage": [0.0 if row["stage"] == "drift" else 1.0 for row in history],
        "epoch": [row["epoch"] for row in history],
        "train_loss": [row["train_loss"] for row in history],
        "val_loss": [row["val_loss"] for row in history],
    }, comment="training loss (stage 0 = joint, 1 = noise refinement)")


def stage_fit_nn(cfg: PipelineConfig, out: Path) -> list:
    """Fixed-voltage and parameter-dependent network fits."""
    out = Path(out)
    written = []
    fixed_voltages = cfg.voltages if cfg.fit_all_voltages else [cfg.km_voltage]
    for v in fixed_voltages:
        drift_pairs = extract_drift_pairs(cfg, out, voltages=[v])
        diff_pairs = load_burst_pairs(cfg, out, voltages=[v])
        model = MLPModel.create(seed=cfg.seed + 101)
        model, history = train_two_stage(drift_pairs, diff_pairs,
                                         cfg.train_config(101), model=model)
        mpath = out / f"nn_model_{_voltage_tag(v)}.npz"
        save_nn(mpath, model)
        hpath = out / f"nn_loss_{_voltage_tag(v)}.txt"
        _write_history(hpath, history)
        written.extend([mpath, hpath])
    if len(cfg.voltages) > 1:
        drift_pairs = extract_drift_pairs(cfg, out)
        diff_pairs = load_burst_pairs(cfg, out)
        model = MLPModel.create_parametric(seed=cfg.seed + 202)
        model, history = train_two_stage(drift_pairs, diff_pairs,
                                         cfg.train_config(202), model=model)
        mpath = out / "nn_param_model.npz"
        save_nn(mpath, model)
        hpath = out / "nn_param_loss.txt"
        _write_history(hpath, history)
        written.extend([mpath, hpath])
    update_manifest(out, cfg, "fit-nn", written)
    return written


# ---------------------------------------------------------------------------
# integration, potentials, comparisons
# ---------------------------------------------------------------------------

def _load_any_model(out: Path, name: str, cfg: PipelineConfig):
    out = Path(out)
    if name == "km":
        return load_tabulated(out / f"km_model_{_voltage_tag(cfg.km_voltage)}.txt")
    if name == "nn":
        return load_nn(out / f"nn_model_{_voltage_tag(cfg.km_voltage)}.npz")
    if name == "nn-param":
        return load_nn(out / "nn_param_model.npz")
    raise ValueError(f"unknown model name {name!r}")


def stage_integrate(cfg: PipelineConfig, out: Path, model_name: str = "nn",
                    x0=None, n_steps=None, h=None, p=None) -> Path:
    out = Path(out)
    model = _load_any_model(out, model_name, cfg)
    if x0 is None:
        dmap = load_dmap(out / "dmaps_model.npz")
        x0 = dmap.embedding.mean(axis=0)
    h = cfg.integrate_h if h is None else h
    n_steps = cfg.integrate_steps if n_steps is None else n_steps
    p = cfg.km_voltage if p is None else p
    rng = np.random.default_rng([cfg.seed, 53])
    path_arr = em_integrate(model, np.asarray(x0, float), h, n_steps, rng, p=p)
    tpath = out / f"integrated_{model_name}.txt"
    write_table(tpath, {
        "step": np.arange(len(path_arr)),
        "time_frames": np.arange(len(path_arr)) * h,
        "phi1": path_arr[:, 0], "phi2": path_arr[:, 1],
    }, comment=f"latent rollout of model {model_name}")
    update_manifest(out, cfg, "integrate", [tpath])
    return tpath


def stage_free_energy(cfg: PipelineConfig, out: Path) -> list:
    """Per-voltage effective-potential surfaces plus diagnostics."""
    out = Path(out)
    dmap = load_dmap(out / "dmaps_model.npz")
    grid_nodes = evaluation_grid(dmap.embedding, cfg.potential_grid)
    param_path = out / "nn_param_model.npz"
    written = []
    diag_lines = []
    for v in cfg.voltages:
        if param_path.exists():
            model = load_nn(param_path)
        else:
            model = _load_any_model(out, "nn", cfg)
        fieldp = effective_potential(model, grid_nodes, p=v,
                                     n_substeps=cfg.potential_substeps)
        fpath = out / f"free_energy_{_voltage_tag(v)}.txt"
        save_potential(fpath, fieldp)
        written.append(fpath)
        ratio = divergence_drift_ratio(model, grid_nodes, p=v)
        residue = boundary_loop_residue(model, grid_nodes, p=v,
                                        n_substeps=cfg.potential_substeps)
        diag_lines.append(f"voltage={v:g} div_term_over_drift={ratio:.6g} "
                          f"boundary_loop_residue={residue:.6g}")
    dpath = out / "free_energy_diagnostics.txt"
    dpath.write_text("\n".join(diag_lines) + "\n")
    written.append(dpath)
    update_manifest(out, cfg, "free-energy", written)
    return written


def simulate_latent_ensemble(cfg: PipelineConfig, out: Path, c0, v: float,
                             n_paths: int, n_frames: int, seed_key):
    """Restricted BD ensemble from one fine-scale initial configuration."""
    out = Path(out)
    fields, index, ref_sorted, grid, meta = load_corpus(out)
    dmap = load_dmap(out / "dmaps_model.npz")
    params = cfg.physical_params(v)
    steps_per_frame = int(round(cfg.save_interval / cfg.dt))
    pos = np.repeat(c0.positions[None], n_paths, axis=0)
    rngs = np.random.default_rng([cfg.seed, *seed_key]).spawn(n_paths)
    sqrt_noise = np.sqrt(2.0 * params.D0 * cfg.dt)
    coords = np.full((n_paths, n_frames + 1, 2), np.nan)

    def restrict_all(positions, frame_k):
        frames = [ParticleConfiguration(positions[i], time=0.0)
                  for i in range(n_paths)]
        ffields, kept = featurize_frames(frames, ref_sorted, grid)
        if len(kept):
            coords[kept, frame_k] = dmap.restrict_coords(ffields)

    restrict_all(pos, 0)
    for k in range(n_frames):
        for _ in range(steps_per_frame):
            F = total_forces(pos, params)
            noise = np.stack([g.standard_normal(c0.positions.shape) for g in rngs])
            pos += (params.D0 / params.temperature_kT) * F * cfg.dt + sqrt_noise * noise
        restrict_all(pos, k + 1)
    return coords


def _envelope_columns(paths: np.ndarray, times: np.ndarray, prefix: str) -> dict:
    cols = {}
    for d, name in ((0, "phi1"), (1, "phi2")):
        coord = paths[:, :, d]
        cols[f"{prefix}_{name}_mean"] = np.nanmean(coord, axis=0)
        cols[f"{prefix}_{name}_min"] = np.nanmin(coord, axis=0)
        cols[f"{prefix}_{name}_max"] = np.nanmax(coord, axis=0)
    return cols


def compare_paths(models: dict, x0_latent: np.ndarray, bd_paths: np.ndarray,
                  h: float, rng_seeds: dict, p: float):
    """Mean and min-max envelopes of model rollouts against restricted paths.

    ``bd_paths`` has shape (n_paths, n_frames+1, 2); each model integrates the
    same number of paths and steps from the shared latent initial condition.
    """
    n_paths, n_times, _ = bd_paths.shape
    n_steps = int(round((n_times - 1) / h))
    times = np.arange(n_times) * 1.0
    cols = {"time_frames": times}
    cols.update(_envelope_columns(bd_paths, times, "bd"))
    out_paths = {}
    for name, model in models.items():
        paths = np.empty((n_paths, n_times, 2))
        rng = np.random.default_rng(rng_seeds[name])
        stride = max(int(round(1.0 / h)), 1)
        for i in range(n_paths):
            roll = em_integrate(model, x0_latent, h, n_steps, rng, p=p)
            paths[i] = roll[::stride][:n_times]
        cols.update(_envelope_columns(paths, times, name))
        out_paths[name] = paths
    return cols, out_paths


def _first_kept_frame(cfg, out, v):
    """Earliest restricted frame of the first trajectory at a voltage."""
    vdir = Path(out) / "restricted" / _voltage_tag(v)
    for path in sorted(vdir.glob("traj_*.txt")):
        _, data = read_table(path)
        if len(data):
            tj = int(path.stem.split("_")[1])
            return tj, int(data[0, 0]), data[0, 2:4]
    raise RuntimeError(f"no restricted frames at voltage {v}")


def stage_compare(cfg: PipelineConfig, out: Path) -> list:
    """Trajectory envelopes (models vs restricted BD) and coefficient gaps."""
    out = Path(out)
    trajs = load_trajectories(cfg, out)
    v = cfg.km_voltage
    km = _load_any_model(out, "km", cfg)
    nn = _load_any_model(out, "nn", cfg)

    tj, fk, x0_latent = _first_kept_frame(cfg, out, v)
    c0 = trajs[v][tj].frames[fk]
    n_frames = cfg.compare_steps
    bd_paths = simulate_latent_ensemble(cfg, out, c0, v, cfg.n_compare_paths,
                                        n_frames, seed_key=(71,))
    cols, _ = compare_paths(
        {"nn": nn, "km": km}, x0_latent, bd_paths, h=cfg.burst_h_frames,
        rng_seeds={"nn": [cfg.seed, 72], "km": [cfg.seed, 73]}, p=v)
    epath = out / "compare_envelopes.txt"
    write_table(epath, cols, comment="mean/min/max envelopes, models vs BD")

    dmap = load_dmap(out / "dmaps_model.npz")
    grid = evaluation_grid(dmap.embedding, 20)
    comp = compare_models(nn, km, grid, p=v)
    gpath = out / "model_difference.txt"
    write_table(gpath, {
        "phi1": grid[:, 0], "phi2": grid[:, 1],
        "d_nu1": comp["diffs"]["nu1"], "d_nu2": comp["diffs"]["nu2"],
        "d_sigma11": comp["diffs"]["sigma11"],
        "d_sigma22": comp["diffs"]["sigma22"],
    }, comment="per-node absolute coefficient differences, network vs tabulated")
    mpath = out / "model_difference_means.txt"
    write_table(mpath, {k: [vv] for k, vv in comp["means"].items()},
                comment="mean absolute coefficient differences on the grid")
    update_manifest(out, cfg, "compare", [epath, gpath, mpath])
    return [epath, gpath, mpath]


def stage_uq(cfg: PipelineConfig, out: Path) -> list:
    """Ensemble spread maps for the fixed-voltage network."""
    out = Path(out)
    v = cfg.km_voltage
    drift_pairs = extract_drift_pairs(cfg, out, voltages=[v])
    diff_pairs = load_burst_pairs(cfg, out, voltages=[v])
    res = ensemble_uq(drift_pairs, diff_pairs, cfg.train_config(101),
                      cfg.uq_models, p_eval=v)
    written = []
    for tag in ("grid", "data"):
        pts = res["grid"] if tag == "grid" else res["data_points"]
        cols = {"phi1": pts[:, 0], "phi2": pts[:, 1]}
        for ci, cname in enumerate(res["columns"]):
            cols[f"{cname}_mean"] = res[f"{tag}_mean"][:, ci]
            cols[f"{cname}_std"] = res[f"{tag}_std"][:, ci]
        path = out / f"uq_{tag}.txt"
        write_table(path, cols, comment=f"ensemble mean/std on {tag} points "
                    f"({res['n_members']} members)")
        written.append(path)
    update_manifest(out, cfg, "uq", written)
    return written


# ---------------------------------------------------------------------------
# figure tables + report
# ---------------------------------------------------------------------------

def stage_figures(cfg: PipelineConfig, out: Path) -> list:
    """Remaining figure-analogue tables: vector fields, surfaces, lifting."""
    out = Path(out)
    dmap = load_dmap(out / "dmaps_model.npz")
    fields, index, ref_sorted, grid, meta = load_corpus(out)
    nn = _load_any_model(out, "nn", cfg)
    km = _load_any_model(out, "km", cfg)
    v = cfg.km_voltage
    emb = dmap.embedding
    written = []

    sub = np.arange(0, len(emb), max(len(emb) // 300, 1))
    for name, model in (("nn", nn), ("km", km)):
        nu, L = (model.evaluate_batch(emb[sub], v) if hasattr(model, "evaluate_batch")
                 else (None, None))
        cov = L @ np.swapaxes(L, 1, 2)
        path = out / f"coeff_field_{name}.txt"
        write_table(path, {
            "phi1": emb[sub, 0], "phi2": emb[sub, 1],
            "nu1": nu[:, 0], "nu2": nu[:, 1],
            "sigma11": np.sqrt(cov[:, 0, 0]), "sigma22": np.sqrt(cov[:, 1, 1]),
            "sigma12": cov[:, 0, 1],
        }, comment=f"drift/noise coefficients of {name} on subsampled data")
        written.append(path)

    if (out / "nn_param_model.npz").exists():
        param = load_nn(out / "nn_param_model.npz")
        rows = {"voltage": [], "phi1": [], "phi2": [], "nu1": [], "nu2": [],
                "sigma11": [], "sigma22": []}
        for vv in cfg.voltages:
            nu, L = param.evaluate_batch(emb[sub], vv)
            cov = L @ np.swapaxes(L, 1, 2)
            rows["voltage"].extend([vv] * len(sub))
            rows["phi1"].extend(emb[sub, 0])
            rows["phi2"].extend(emb[sub, 1])
            rows["nu1"].extend(nu[:, 0])
            rows["nu2"].extend(nu[:, 1])
            rows["sigma11"].extend(np.sqrt(cov[:, 0, 0]))
            rows["sigma22"].extend(np.sqrt(cov[:, 1, 1]))
        path = out / "coeff_by_voltage.txt"
        write_table(path, rows,
                    comment="parameter-dependent coefficients across voltages")
        written.append(path)

        for vv in cfg.voltages:
            tj, fk, x0_latent = _first_kept_frame(cfg, out, vv)
            rng = np.random.default_rng([cfg.seed, 91, int(vv * 10)])
            n_steps = cfg.compare_steps * max(int(round(1.0 / cfg.burst_h_frames)), 1)
            paths = np.stack([
                em_integrate(param, x0_latent, cfg.burst_h_frames, n_steps,
                             rng, p=vv)
                for _ in range(min(cfg.n_compare_paths, 25))
            ])
            stride = max(int(round(1.0 / cfg.burst_h_frames)), 1)
            paths = paths[:, ::stride]
            vdir = out / "restricted" / _voltage_tag(vv)
            _, data = read_table(sorted(vdir.glob("traj_*.txt"))[tj])
            cols = {"time_frames": np.arange(paths.shape[1])}
            cols.update(_envelope_columns(paths, cols["time_frames"], "model"))
            nbd = min(len(data), paths.shape[1])
            for d, cname in ((0, "phi1"), (1, "phi2")):
                ref_col = np.full(paths.shape[1], np.nan)
                ref_col[:nbd] = data[:nbd, 2 + d]
                cols[f"bd_{cname}"] = ref_col
            path = out / f"param_paths_{_voltage_tag(vv)}.txt"
            write_table(path, cols, comment="parameter-model envelopes vs one "
                        "restricted path")
            written.append(path)

    # naive nearest-neighbor lifting of one rollout
    rollout_path = out / "integrated_nn.txt"
    if rollout_path.exists():
        _, roll = read_table(rollout_path)
        ids = []
        for q in roll[:, 2:4]:
            d2 = ((emb - q[None, :]) ** 2).sum(axis=1)
            ids.append(int(np.argmin(d2)))
        path = out / "lifted_ids.txt"
        write_table(path, {
            "step": roll[:, 0], "phi1": roll[:, 2], "phi2": roll[:, 3],
            "corpus_row": np.array(ids, dtype=float),
        }, comment="nearest-training-configuration lifting of a rollout")
        written.append(path)

    update_manifest(out, cfg, "figures", written)
    return written


def emit_plots(out: Path) -> list:
    """Static vector graphics for every emitted table."""
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "colloidsde"
    import matplotlib.pyplot as plt

    out = Path(out)
    plot_dir = out / "plots"
    plot_dir.mkdir(exist_ok=True)
    written = []

    def save(fig, name):
        path = plot_dir / name
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        written.append(path)

    emb_path = out / "embedding.txt"
    if emb_path.exists():
        names, data = read_table(emb_path)
        col = {n: data[:, i] for i, n in enumerate(names)}
        fig, axes = plt.subplots(1, 3, figsize=(13, 4), constrained_layout=True)
        for ax, cname in zip(axes, ("rg", "psi6", "c6")):
            sc = ax.scatter(col["phi1"], col["phi2"], c=col[cname], s=6,
                            cmap="viridis")
            ax.set_xlabel("phi1")
            ax.set_ylabel("phi2")
            ax.set_title(cname)
            fig.colorbar(sc, ax=ax)
        save(fig, "embedding_order_params.svg")

    for name in ("nn", "km"):
        cpath = out / f"coeff_field_{name}.txt"
        if not cpath.exists():
            continue
        names, data = read_table(cpath)
        col = {n: data[:, i] for i, n in enumerate(names)}
        fig, axes = plt.subplots(1, 2, figsize=(11, 4.5), constrained_layout=True)
        axes[0].quiver(col["phi1"], col["phi2"], col["nu1"], col["nu2"],
                       angles="xy")
        axes[0].set_title(f"{name} drift field")
        sc = axes[1].scatter(col["phi1"], col["phi2"], c=col["sigma11"], s=8,
                             cmap="magma")
        axes[1].set_title(f"{name} sigma11")
        fig.colorbar(sc, ax=axes[1])
        save(fig, f"coeff_field_{name}.svg")

    epath = out / "compare_envelopes.txt"
    if epath.exists():
        names, data = read_table(epath)
        col = {n: data[:, i] for i, n in enumerate(names)}
        fig, axes = plt.subplots(2, 2, figsize=(11, 7), constrained_layout=True)
        for row, model in enumerate(("nn", "km")):
            for d, cname in enumerate(("phi1", "phi2")):
                ax = axes[row][d]
                t = col["time_frames"]
                for src, color in ((model, "tab:red"), ("bd", "tab:blue")):
                    ax.fill_between(t, col[f"{src}_{cname}_min"],
                                    col[f"{src}_{cname}_max"], alpha=0.25,
                                    color=color)
                    ax.plot(t, col[f"{src}_{cname}_mean"], color=color,
                            label=src)
                ax.set_title(f"{model} vs bd: {cname}")
                ax.legend()
        save(fig, "compare_envelopes.svg")

    for fpath in sorted(out.glob("free_energy_v*.txt")):
        names, data = read_table(fpath)
        col = {n: data[:, i] for i, n in enumerate(names)}
        fig, ax = plt.subplots(figsize=(5.2, 4.4), constrained_layout=True)
        ok = col["evaluable"] > 0
        sc = ax.scatter(col["phi1"][ok], col["phi2"][ok],
                        c=col["G_over_kT"][ok], s=22, cmap="viridis")
        ax.set_title(fpath.stem)
        fig.colorbar(sc, ax=ax)
        save(fig, fpath.stem + ".svg")

    for upath in (out / "uq_grid.txt", out / "uq_data.txt"):
        if not upath.exists():
            continue
        names, data = read_table(upath)
        col = {n: data[:, i] for i, n in enumerate(names)}
        fig, axes = plt.subplots(2, 2, figsize=(10, 8), constrained_layout=True)
        for ax, cname in zip(axes.ravel(),
                             ("nu1_mean", "nu1_std", "sigma11_mean", "sigma11_std")):
            sc = ax.scatter(col["phi1"], col["phi2"], c=col[cname], s=14,
                            cmap="cividis")
            ax.set_title(cname)
            fig.colorbar(sc, ax=ax)
        save(fig, upath.stem + ".svg")

    for ppath in sorted(out.glob("param_paths_v*.txt")):
        names, data = read_table(ppath)
        col = {n: data[:, i] for i, n in enumerate(names)}
        fig, axes = plt.subplots(1, 2, figsize=(10, 4), constrained_layout=True)
        t = col["time_frames"]
        for d, cname in enumerate(("phi1", "phi2")):
            ax = axes[d]
            ax.fill_between(t, col[f"model_{cname}_min"],
                            col[f"model_{cname}_max"], alpha=0.3,
                            color="tab:red")
            ax.plot(t, col[f"model_{cname}_mean"], color="tab:red",
                    label="model")
            ax.plot(t, col[f"bd_{cname}"], color="tab:blue", label="bd")
            ax.set_title(f"{ppath.stem}: {cname}")
            ax.legend()
        save(fig, ppath.stem + ".svg")

    for xpath in sorted(out.glob("external_restricted_*.txt")):
        tag = xpath.stem.replace("external_restricted_", "")
        names, data = read_table(xpath)
        col = {n: data[:, i] for i, n in enumerate(names)}
        fig, ax = plt.subplots(figsize=(5.2, 4.4), constrained_layout=True)
        ax.plot(col["phi1"], col["phi2"], "-o", ms=2, color="tab:blue",
                label="external")
        rpath = out / f"external_rollout_{tag}.txt"
        if rpath.exists():
            rn, rdata = read_table(rpath)
            rcol = {n: rdata[:, i] for i, n in enumerate(rn)}
            ax.plot(rcol["phi1"], rcol["phi2"], color="tab:red", label="model")
        ax.legend()
        ax.set_title(f"external comparison {tag}")
        save(fig, f"external_{tag}.svg")

    return written


def stage_report(cfg: PipelineConfig, out: Path,
                 external_paths=()) -> None:
    """Run the full pipeline in order and emit every table and plot."""
    out = Path(out)
    stage_simulate(cfg, out)
    stage_order_params(cfg, out)
    stage_featurize(cfg, out)
    stage_dmaps(cfg, out)
    stage_restrict(cfg, out)
    stage_fit_km(cfg, out)
    stage_fit_nn(cfg, out)
    stage_integrate(cfg, out, "nn")
    stage_free_energy(cfg, out)
    stage_compare(cfg, out)
    stage_uq(cfg, out)
    stage_figures(cfg, out)
    if external_paths:
        stage_restrict_external(cfg, out, external_paths)
    plots = emit_plots(out)
    update_manifest(out, cfg, "report", plots)

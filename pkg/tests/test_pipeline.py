import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from colloidsde import pipeline
from colloidsde.bd import ParticleConfiguration, Trajectory
from colloidsde.config import (PipelineConfig, config_reference, load_config,
                               write_config)
from colloidsde.io_utils import read_table, read_trajectory, write_trajectory

MICRO = dict(
    voltages=[0.5, 0.8], n_particles=14, n_trajectories=2,
    horizon=2.4, save_interval=0.08, dt=5e-4,
    init_disc_radius=9.0, init_min_separation=2.9,
    subsample_target=150, grid_size=32,
    km_anchors=8, km_replicas=6,
    epochs_stage1=8, epochs_stage2=6, batch_size=32,
    nonharmonic_threshold=0.2, dmaps_k=8,
    n_compare_paths=4, compare_steps=10, uq_models=2,
    potential_grid=8, potential_substeps=40,
    integrate_steps=40, seed=12,
)


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro")
    cfg = PipelineConfig(**MICRO)
    pipeline.stage_report(cfg, out)
    return cfg, out


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_config_file_roundtrip(tmp_path):
    cfg = PipelineConfig(**MICRO)
    path = tmp_path / "run.cfg"
    write_config(path, cfg)
    loaded = load_config(path)
    assert loaded == cfg
    assert loaded.config_hash() == cfg.config_hash()


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("not_a_key = 3\n")
    with pytest.raises(ValueError, match="unknown config key"):
        load_config(path)


def test_config_parses_comments_and_lists(tmp_path):
    path = tmp_path / "ok.cfg"
    path.write_text("voltages = 0.5, 0.7   # two levels\nseed = 9\n\n")
    cfg = load_config(path)
    assert cfg.voltages == [0.5, 0.7]
    assert cfg.seed == 9


def test_config_reference_covers_every_key():
    text = config_reference()
    for key in MICRO:
        assert key in text


# ---------------------------------------------------------------------------
# subsampling
# ---------------------------------------------------------------------------

def test_subsample_capping_invariant():
    rng = np.random.default_rng(0)
    rg = np.concatenate([rng.normal(1.0, 0.01, 900), rng.uniform(1.0, 2.0, 300)])
    psi6 = np.concatenate([rng.normal(0.8, 0.01, 900), rng.uniform(0, 1, 300)])
    idx, cap = pipeline.subsample_uniform(rg, psi6, 400, 20)
    assert len(idx) >= 400
    # no (rg, psi6) bin exceeds the cap
    bins = 20
    rg_edges = np.linspace(rg.min(), rg.max() + 1e-12, bins + 1)
    ps_edges = np.linspace(psi6.min(), psi6.max() + 1e-12, bins + 1)
    bx = np.clip(np.digitize(rg[idx], rg_edges) - 1, 0, bins - 1)
    by = np.clip(np.digitize(psi6[idx], ps_edges) - 1, 0, bins - 1)
    counts = np.zeros((bins, bins), dtype=int)
    for a, b in zip(bx, by):
        counts[a, b] += 1
    assert counts.max() <= cap


def test_subsample_small_input_passthrough():
    idx, cap = pipeline.subsample_uniform(np.ones(10), np.ones(10), 50, 20)
    assert np.array_equal(idx, np.arange(10))


# ---------------------------------------------------------------------------
# full micro pipeline
# ---------------------------------------------------------------------------

def test_report_emits_expected_artifacts(micro_run):
    cfg, out = micro_run
    expected = [
        "config.txt", "order_params.txt", "corpus.npz", "dmaps_model.npz",
        "embedding.txt", "km_model_v0p8.txt", "nn_model_v0p8.npz",
        "nn_param_model.npz", "compare_envelopes.txt", "model_difference.txt",
        "model_difference_means.txt", "free_energy_v0p5.txt",
        "free_energy_v0p8.txt", "uq_grid.txt", "uq_data.txt",
        "coeff_field_nn.txt", "coeff_field_km.txt", "coeff_by_voltage.txt",
        "integrated_nn.txt", "lifted_ids.txt", "manifest.json",
        "param_paths_v0p5.txt", "param_paths_v0p8.txt",
    ]
    for name in expected:
        assert (out / name).exists(), f"missing artifact {name}"
    assert (out / "plots").glob("*.svg")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == cfg.config_hash()
    # every artifact the manifest lists is present with a hash
    for rel in manifest["artifacts"]:
        assert (out / rel).exists()


def test_envelopes_contain_their_means(micro_run):
    _, out = micro_run
    names, data = read_table(out / "compare_envelopes.txt")
    col = {n: data[:, i] for i, n in enumerate(names)}
    for src in ("bd", "nn", "km"):
        for coord in ("phi1", "phi2"):
            mean = col[f"{src}_{coord}_mean"]
            lo = col[f"{src}_{coord}_min"]
            hi = col[f"{src}_{coord}_max"]
            ok = np.isfinite(mean)
            assert np.all(lo[ok] <= mean[ok] + 1e-12)
            assert np.all(mean[ok] <= hi[ok] + 1e-12)


def test_restricted_paths_written_per_trajectory(micro_run):
    cfg, out = micro_run
    for v in cfg.voltages:
        vdir = out / "restricted" / pipeline._voltage_tag(v)
        files = sorted(vdir.glob("traj_*.txt"))
        assert len(files) == cfg.n_trajectories


def test_potential_reference_is_zero(micro_run):
    _, out = micro_run
    names, data = read_table(out / "free_energy_v0p8.txt")
    col = {n: data[:, i] for i, n in enumerate(names)}
    norms = col["phi1"] ** 2 + col["phi2"] ** 2
    ref = np.argmin(norms)
    assert col["G_over_kT"][ref] == 0.0


def test_external_restriction(micro_run, tmp_path):
    cfg, out = micro_run
    # synthesize an external recording with a different particle count and a
    # different length scale, from fresh dynamics
    from colloidsde.bd import random_disc_configuration, simulate

    params = cfg.physical_params(0.7)
    params = params.__class__(**{**params.__dict__, "n_particles": 11})
    rng = np.random.default_rng(99)
    c0 = random_disc_configuration(rng, 11, 8.0, 2.9,
                                   params_ref=params.params_hash())
    traj = simulate(c0, 1.6, cfg.dt, cfg.save_interval, rng, params)
    scaled = Trajectory(
        [ParticleConfiguration(f.positions * 55.0, time=f.time)
         for f in traj.frames], traj.save_interval)
    ext_path = tmp_path / "external_run.txt"
    write_trajectory(ext_path, scaled, cfg.dt)

    written = pipeline.stage_restrict_external(cfg, out, [ext_path])
    restricted = [p for p in written if "restricted" in p.name]
    assert restricted
    names, data = read_table(restricted[0])
    assert data.shape[1] == 4
    assert len(data) > 0
    assert np.all(np.isfinite(data[:, 2:]))
    rollouts = [p for p in written if "rollout" in p.name]
    assert rollouts and read_table(rollouts[0])[1].shape[0] > 1


# ---------------------------------------------------------------------------
# determinism and CLI
# ---------------------------------------------------------------------------

TINY = dict(
    voltages=[0.8], n_particles=12, n_trajectories=2,
    horizon=1.6, save_interval=0.08, dt=5e-4,
    init_disc_radius=8.5, init_min_separation=2.9,
    subsample_target=60, grid_size=32,
    km_anchors=6, km_replicas=4,
    epochs_stage1=5, epochs_stage2=4, batch_size=16,
    nonharmonic_threshold=0.2, dmaps_k=6,
    n_compare_paths=3, compare_steps=8, uq_models=2,
    potential_grid=6, potential_substeps=30,
    integrate_steps=20, seed=3,
)


def run_cli(args, cwd):
    return subprocess.run(
        [sys.executable, "-m", "colloidsde.cli", *args],
        capture_output=True, text=True, cwd=cwd)


def test_cli_stages_are_bitwise_reproducible(tmp_path):
    cfg_path = tmp_path / "tiny.cfg"
    write_config(cfg_path, PipelineConfig(**TINY))
    outs = []
    for run in ("a", "b"):
        out = tmp_path / f"run_{run}"
        for cmd in ("simulate", "order-params", "featurize", "dmaps",
                    "restrict", "fit-km", "fit-nn", "integrate",
                    "free-energy"):
            res = run_cli(["--config", str(cfg_path), "--out", str(out), cmd],
                          cwd=tmp_path)
            assert res.returncode == 0, f"{cmd} failed: {res.stderr}"
        outs.append(out)
    a, b = outs
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        if rel.name == "manifest.json":
            ma = json.loads((a / rel).read_text())
            mb = json.loads((b / rel).read_text())
            assert ma["artifacts"] == mb["artifacts"]
            continue
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), \
            f"artifact differs: {rel}"


def test_cli_error_record_on_bad_input(tmp_path):
    res = run_cli(["--out", str(tmp_path / "x"), "dmaps"], cwd=tmp_path)
    assert res.returncode == 1
    record = json.loads(res.stderr.strip().splitlines()[-1])
    assert "error" in record and record["command"] == "dmaps"


def test_cli_config_reference_prints(tmp_path):
    res = run_cli(["config-reference"], cwd=tmp_path)
    assert res.returncode == 0
    assert "voltages" in res.stdout


def test_trajectory_file_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    frames = [ParticleConfiguration(rng.normal(size=(5, 2)), time=0.1 * k)
              for k in range(4)]
    traj = Trajectory(frames, 0.1)
    path = tmp_path / "t.txt"
    write_trajectory(path, traj, dt=0.01, params_hash="abc123")
    loaded = read_trajectory(path)
    assert len(loaded.frames) == 4
    for f1, f2 in zip(traj.frames, loaded.frames):
        assert np.array_equal(f1.positions, f2.positions)
        assert f2.params_ref == "abc123"

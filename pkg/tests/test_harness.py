import json
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefnp.harness import (
    PRESETS,
    ConfigError,
    DegenerateVarianceWarning,
    ExperimentConfig,
    Report,
    cluster_separation,
    emit_plot_data,
    linear_fit,
    load_plot_files,
    load_report,
    parse_table,
    pca_project,
    preset,
    run_experiment,
    substream,
    table_text,
    write_report,
)
from prefnp.harness.runner import _simplex_bin


def shrunk(name: str, out_dir, **train) -> ExperimentConfig:
    """A preset cut down to seconds of work."""
    c = preset(name).to_dict()
    c["population"].update(n_train=400, n_val=100, n_test=100)
    c["train"].update(max_steps=3, n_val_tasks=8, **train)
    c["eval"]["n_test_tasks"] = 20
    if "n_trials" in c["options"]:
        c["options"]["n_trials"] = 50
    if name == "scaling-bench":
        c["options"].update(nc_grid=[1, 16, 32], repeats=2)
    if name == "np-dpo-toy":
        c["options"]["steer_samples"] = 6
    if "rho_train_grid" in c["options"]:
        c["options"]["rho_train_grid"] = [-1.0, 0.0]
    if "train_rates" in c["options"]:
        c["options"]["train_rates"] = [1.0, 0.5]
    c["out_dir"] = str(out_dir)
    return ExperimentConfig.from_dict(c)


# -- config ---------------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_preset_config_round_trip(name, tmp_path):
    cfg = preset(name)
    cfg.save(tmp_path / "c.json")
    back = ExperimentConfig.load(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict()
    assert back.config_hash() == cfg.config_hash()


def test_config_hash_ignores_out_dir_only():
    cfg = preset("example-3-1")
    assert cfg.with_overrides(out_dir="/elsewhere").config_hash() == cfg.config_hash()
    assert cfg.with_overrides(seed=1).config_hash() != cfg.config_hash()
    assert len(cfg.config_hash()) == 12


def test_config_errors():
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig.from_dict({"experiment_id": "x", "bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment_id": "x", "model": "gpt"})
    with pytest.raises(ConfigError):
        ExperimentConfig.loads("[1, 2]")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment_id": "x", "train": {"nope": 3}})
    with pytest.raises(KeyError):
        preset("no-such-preset")


def test_substreams_are_stable_and_distinct():
    assert substream(0, "data") == substream(0, "data")
    assert len({substream(0, "data"), substream(0, "eval"), substream(1, "data")}) == 3


# -- analysis ---------------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(3, 12))
def test_pca_matches_dense_eigh(seed, dim):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((60, dim)) * rng.uniform(0.2, 3.0, dim)
    proj = pca_project(x, 2)
    xc = x - x.mean(axis=0)
    vals, vecs = np.linalg.eigh(xc.T @ xc / (len(x) - 1))
    vals, vecs = vals[::-1], vecs[:, ::-1]
    assert np.allclose(proj.eigenvalues, vals[:2], atol=1e-6 * max(1.0, vals[0]), rtol=0)
    for i in range(2):
        if vals[i] - vals[i + 1] > 1e-3 * vals[0]:
            assert abs(abs(proj.components[i] @ vecs[:, i]) - 1) < 1e-6
    assert np.allclose(proj.components @ proj.components.T, np.eye(2), atol=1e-10)
    assert np.allclose(proj.coords, xc @ proj.components.T)


def test_pca_axis_aligned_recovers_axes():
    # orthogonal +-1 patterns give a sample covariance that is exactly diagonal
    x = np.zeros((8, 3))
    x[:, 1] = 5.0 * np.array([1, -1, 1, -1, 1, -1, 1, -1])
    x[:, 2] = 1.0 * np.array([1, 1, -1, -1, 1, 1, -1, -1])
    proj = pca_project(x, 2)
    assert np.allclose(proj.components, [[0, 1, 0], [0, 0, 1]], atol=1e-6)
    assert np.allclose(proj.eigenvalues, [25 * 8 / 7, 8 / 7], atol=1e-9)


def test_pca_degenerate_variance():
    with pytest.warns(DegenerateVarianceWarning):
        proj = pca_project(np.ones((5, 4)), 2)
    assert np.array_equal(proj.coords, np.zeros((5, 2)))
    with pytest.raises(ValueError):
        pca_project(np.ones((1, 4)))


def test_silhouette_separated_and_shuffled():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((100, 2)) * 0.1
    b = rng.standard_normal((100, 2)) * 0.1 + [5.0, 0.0]
    coords = np.vstack([a, b])
    labels = [0] * 100 + [1] * 100
    assert cluster_separation(coords, labels) > 0.9
    shuffled = rng.permutation(labels)
    assert abs(cluster_separation(coords, shuffled)) < 0.1
    with pytest.raises(ValueError):
        cluster_separation(coords, [0] * 200)


def test_linear_fit_exact_line():
    a, b, r2 = linear_fit(np.array([1.0, 2, 3, 4]), np.array([3.0, 5, 7, 9]))
    assert (round(a, 12), round(b, 12), round(r2, 12)) == (1.0, 2.0, 1.0)


# -- simplex bins ------------------------------------------------------------------


def test_simplex_bins_2d():
    assert _simplex_bin(np.array([0.05, 0.95]))["bin"] == "0"
    assert _simplex_bin(np.array([1.0, 0.0]))["bin"] == "9"
    assert len({_simplex_bin(np.array([w, 1 - w]))["bin"] for w in np.linspace(0, 1, 1001)}) == 10


def test_simplex_bins_3d_cover_100_triangles():
    rng = np.random.default_rng(0)
    seen = set()
    for w in rng.dirichlet([1, 1, 1], 200_000):
        b = _simplex_bin(w)
        seen.add(b["bin"])
    assert len(seen) == 100
    c = _simplex_bin(np.array([0.02, 0.03, 0.95]))
    assert c["bin"] == "0,0,up" and abs(c["centroid0"] + c["centroid1"] + c["centroid2"] - 1) < 1e-12


# -- reports -----------------------------------------------------------------------


def test_table_round_trip_exact():
    rows = [{"a": 1, "b": 0.1 + 0.2, "c": "x\ty", "d": True, "e": None}, {"a": 2, "b": 1e-300, "c": "", "d": False, "e": 3.5}]
    name, back = parse_table(table_text("t", rows))
    assert name == "t"
    assert back[0]["b"] == 0.1 + 0.2 and back[1]["b"] == 1e-300 and back[0]["c"] == "x\ty"
    assert back[0]["d"] is True and back[0]["e"] is None
    with pytest.raises(ValueError):
        parse_table("garbage\n")


def test_report_round_trip_and_fig1b_columns(tmp_path):
    rep = Report({"k": 1}, "abc", 7, "0.1.0")
    rep.add_table("accuracy", [
        {"model": "np_btl", "n_context": 0, "z_star": "all", "n_tasks": 5, "accuracy_mean": 0.75, "accuracy_stderr": 0.01},
        {"model": "btl", "n_context": 0, "z_star": "all", "n_tasks": 5, "accuracy_mean": 0.7, "accuracy_stderr": 0.01},
        {"model": "np_btl", "n_context": 0, "z_star": "0", "n_tasks": 3, "accuracy_mean": 0.8, "accuracy_stderr": 0.02},
    ])
    rep.add_table("timing", [{"seconds": 1.5}], runtime=True)
    write_report(rep, tmp_path)
    manifest = emit_plot_data(rep, tmp_path)
    back = load_report(tmp_path)
    assert back.tables == rep.tables and back.runtime == rep.runtime
    assert "fig3_pca" in manifest["omitted"]
    plots = load_plot_files(tmp_path)
    fig = plots["fig1b_accuracy"]
    assert [r["model"] for r in fig] == ["np_btl"]
    assert list(fig[0]) == ["model", "n_context", "accuracy_mean", "accuracy_stderr", "n_tasks", "seed", "config_hash"]
    assert len(plots["fig2_accuracy"]) == 3
    assert (tmp_path / "runtime" / "timing.tsv").exists() and not (tmp_path / "timing.tsv").exists()


# -- end-to-end pipelines -------------------------------------------------------------


def _metric_bytes(out: Path) -> dict:
    skip = {"runtime"}
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*"))
            if p.is_file() and not (set(p.relative_to(out).parts) & skip)}


@pytest.mark.parametrize("name", ["example-3-1", "hh-proxy-2mode", "dirichlet-2d", "dirichlet-3d", "bayes-curve",
                                  "conflict-sweep", "np-dpo-toy"])
def test_pipeline_reruns_are_byte_identical(name, tmp_path):
    cfg = shrunk(name, tmp_path)
    a = run_experiment(cfg)
    first = _metric_bytes(tmp_path)
    run_experiment(cfg)
    second = _metric_bytes(tmp_path)
    assert first.keys() == second.keys() and first == second
    assert a.tables and all(r["config_hash"] == a.config_hash for rows in a.tables.values() for r in rows)
    assert load_report(tmp_path).tables.keys() == a.tables.keys()


def test_scaling_pipeline_writes_runtime_only(tmp_path):
    rep = run_experiment(shrunk("scaling-bench", tmp_path))
    assert not rep.tables and {"scaling", "scaling_fit"} <= set(rep.runtime)
    assert json.loads((tmp_path / "manifest.json").read_text())["runtime"]


def test_seed_changes_results(tmp_path):
    a = run_experiment(shrunk("example-3-1", tmp_path / "a"))
    b = run_experiment(shrunk("example-3-1", tmp_path / "b").with_overrides(seed=5))
    assert a.tables["accuracy"] != b.tables["accuracy"]


def test_dirichlet_bins_emitted(tmp_path):
    run_experiment(shrunk("dirichlet-2d", tmp_path))
    rows = load_plot_files(tmp_path)["figD2_simplex_bins"]
    assert {"bin", "n_context", "accuracy_mean"} <= set(rows[0])

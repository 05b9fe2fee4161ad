"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Full-scale preset runs are cached under ``runs/acceptance`` (override with
``PREFNP_ACCEPTANCE_DIR``) and reused while their config hash and code
version match. Set ``PREFNP_ACCEPTANCE_FRESH=1`` to force fresh runs; wall
time of a fresh run is checked against the criterion's budget.
"""

from __future__ import annotations

import json
import math
import os
import time
from collections import OrderedDict
from pathlib import Path

import numpy as np
import pytest
import torch

import prefnp
from prefnp import numcore as nc
from prefnp.harness import ExperimentConfig, load_report, pca_project, preset, run_experiment
from prefnp.oracle import closed_form_error, mc_error_estimate
from prefnp.policy import (
    FiLMParams,
    PolicyConfig,
    SteerablePolicy,
    ToyLanguageSpec,
    film_modulate,
    gen_toy_preferences,
    sequence_log_prob,
)
from prefnp.rewards import RewardModelConfig, create_model, stack_tasks
from prefnp.synthdata import POLICY_TASK_CONFIG, REWARD_TASK_CONFIG, build_pool, sample_tasks

from conftest import VERDICTS

ROOT = Path(os.environ.get("PREFNP_ACCEPTANCE_DIR", Path(__file__).resolve().parents[1] / "runs" / "acceptance"))
FRESH = os.environ.get("PREFNP_ACCEPTANCE_FRESH") == "1"
TIMES = ROOT / "wall_seconds.json"

REFERENCE_ACCURACY = {0: 0.752, 1: 0.800, 3: 0.882, 5: 0.936, 10: 0.972}


def _times() -> dict:
    return json.loads(TIMES.read_text()) if TIMES.exists() else {}


def run_preset(name: str) -> tuple:
    """Report of a full-scale preset run plus its recorded wall seconds."""
    cfg = preset(name).with_overrides(out_dir=str(ROOT / name))
    manifest = Path(cfg.out_dir) / "manifest.json"
    if not FRESH and manifest.exists():
        m = json.loads(manifest.read_text())
        if m["config_hash"] == cfg.config_hash() and m["code_version"] == prefnp.__version__:
            return load_report(cfg.out_dir), _times().get(name)
    t0 = time.perf_counter()
    run_experiment(cfg)
    secs = time.perf_counter() - t0
    ROOT.mkdir(parents=True, exist_ok=True)
    t = _times()
    t[name] = secs
    TIMES.write_text(json.dumps(t, indent=2, sort_keys=True) + "\n")
    return load_report(cfg.out_dir), secs


class Checks:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.items = number, title, []

    def add(self, ok: bool, what: str) -> None:
        self.items.append((bool(ok), what))

    def budget(self, secs, limit: float) -> None:
        if secs is not None:
            self.add(secs <= limit, f"wall {secs:.0f}s <= {limit:.0f}s")

    def finish(self) -> None:
        failed = [w for ok, w in self.items if not ok]
        verdict = "PASS" if not failed else "FAIL"
        detail = "; ".join(w if ok else f"NOT {w}" for ok, w in self.items)
        line = f"CRITERION {self.number} {verdict}: {self.title} | {detail}"
        VERDICTS[self.number] = line
        print(line)
        assert not failed, line


def rows(rep, table: str, **match) -> list[dict]:
    return [r for r in rep.tables[table] if all(r.get(k) == v for k, v in match.items())]


def one(rep, table: str, **match) -> dict:
    found = rows(rep, table, **match)
    assert len(found) == 1, (table, match, len(found))
    return found[0]


def combined(*se) -> float:
    return math.sqrt(sum(s * s for s in se))


# ---------------------------------------------------------------------------


def test_criterion_1_example_accuracy():
    rep, secs = run_preset("example-3-1")
    c = Checks(1, "piecewise example: NP-BTL accuracy vs reference table")
    means = []
    for n, ref in REFERENCE_ACCURACY.items():
        m = one(rep, "accuracy", model="np_btl", n_context=n, z_star="all")["accuracy_mean"]
        means.append(m)
        c.add(abs(m - ref) <= 0.03, f"N^C={n}: {100 * m:.1f} vs {100 * ref:.1f} (+-3)")
    c.add(all(b >= a for a, b in zip(means, means[1:])), "monotone nondecreasing")
    c.budget(secs, 600)
    c.finish()


def test_criterion_2_arcsin_law():
    c = Checks(2, "Bayes single-pair error follows the arcsin law")
    t0 = time.perf_counter()
    for i, rho in enumerate([-0.9, -0.5, 0.0, 0.5, 0.9]):
        p, se = mc_error_estimate(rho, 10**6, 1, 100 + i)
        e = closed_form_error(rho)
        c.add(abs(p - e) <= 3 * se, f"rho={rho}: mc {p:.5f} vs {e:.5f} (3se {3 * se:.5f})")
    c.add(closed_form_error(-1.0) == 0.0 and closed_form_error(1.0) == 0.5, "endpoints exact")
    c.budget(time.perf_counter() - t0, 120)
    c.finish()


def test_criterion_3_bayes_curve():
    rep, secs = run_preset("bayes-curve")
    c = Checks(3, "NP-BTL identification error vs Bayes curve")
    for rho in (-1.0, -0.5, 0.0):
        r = one(rep, "error_curves", rho_train=-1.0, rho_eval=rho)
        c.add(abs(r["np_error"] - r["bayes_error"]) <= 0.05,
              f"rho_tr=-1 rho={rho}: {r['np_error']:.3f} vs bayes {r['bayes_error']:.3f}")
    trains = sorted({r["rho_train"] for r in rep.tables["error_curves"]})
    evals = sorted({r["rho_eval"] for r in rep.tables["error_curves"]})
    bad = []
    for rho in evals:
        seq = [one(rep, "error_curves", rho_train=t, rho_eval=rho) for t in trains]
        for a, b in zip(seq, seq[1:]):
            if b["np_error"] < a["np_error"] - 3 * combined(a["stderr"], b["stderr"]):
                bad.append(f"rho={rho}: {a['rho_train']}->{b['rho_train']}")
    c.add(not bad, "nondecreasing in rho_train at 3 sigma" + (f" (violations {bad})" if bad else ""))
    c.add(min(r["n_trials"] for r in rep.tables["error_curves"]) >= 2000, ">= 2000 trials")
    c.budget(secs, 1800)
    c.finish()


def test_criterion_4_failure_and_recovery():
    rep, secs = run_preset("hh-proxy-2mode")
    c = Checks(4, "two-mode conflict proxy: BTL fails, NP-BTL recovers")
    for z in ("0", "1"):
        b = one(rep, "accuracy", model="btl", n_context=0, z_star=z)["accuracy_mean"]
        c.add(abs(b - 0.5) <= 0.05, f"BTL mode {z}: {b:.3f} in 0.50+-0.05")
        n = one(rep, "accuracy", model="np_btl", n_context=10, z_star=z)["accuracy_mean"]
        c.add(n >= 0.90, f"NP-BTL N^C=10 mode {z}: {n:.3f} >= 0.90")
    b0 = one(rep, "accuracy", model="btl", n_context=0, z_star="all")["accuracy_mean"]
    n0 = one(rep, "accuracy", model="np_btl", n_context=0, z_star="all")["accuracy_mean"]
    c.add(abs(n0 - b0) <= 0.05, f"NP-BTL N^C=0 {n0:.3f} within 0.05 of BTL {b0:.3f}")
    c.budget(secs, 1200)
    c.finish()


def test_criterion_5_conflict_sweep():
    rep, secs = run_preset("conflict-sweep")
    c = Checks(5, "conflict-rate sweep")
    table = rep.tables["conflict_sweep"]
    trains = sorted({r["train_rate"] for r in table}, reverse=True)
    ctx_rates = sorted({r["context_rate"] for r in table}, reverse=True)
    for t in trains:
        seq = [one(rep, "conflict_sweep", train_rate=t, context_rate=cr)["accuracy_mean"] for cr in ctx_rates]
        c.add(all(b <= a for a, b in zip(seq, seq[1:])),
              f"train {t}: " + " > ".join(f"{v:.3f}" for v in seq))
    for cr in ctx_rates:
        w = one(rep, "conflict_sweep", train_rate=0.5, context_rate=cr)
        others = [one(rep, "conflict_sweep", train_rate=t, context_rate=cr) for t in trains if t != 0.5]
        ok = all(o["accuracy_mean"] - w["accuracy_mean"] > 3 * combined(o["accuracy_stderr"], w["accuracy_stderr"])
                 for o in others)
        c.add(ok, f"ctx {cr}: 0.5-trained {w['accuracy_mean']:.3f} worst by 3 sigma")
    c.add(min(r["n_tasks"] for r in table) >= 500, ">= 500 tasks")
    c.budget(secs, 2700)
    c.finish()


def _dpo_grad_checks(c: Checks) -> None:
    lang = ToyLanguageSpec(weight_correlation=-1.0)
    pol = SteerablePolicy.create(lang, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    with torch.no_grad():
        for v in pol.params.values():
            v.add_(torch.as_tensor(0.05 * rng.standard_normal(tuple(v.shape))))
    pools = gen_toy_preferences(lang, pol, {"train": 60, "val": 20, "test": 20}, np.random.default_rng(2), 1.0)
    task = [t for t in sample_tasks(pools["train"], lang.population(), POLICY_TASK_CONFIG, 30, 0) if t.n_context == 3][0]
    batch = stack_tasks([task])

    def loss(p):
        pol.params = p
        return pol.loss(batch) * 100.0

    c.add(nc.grad_check(loss, pol.params.copy(), probe_count=128) < 1e-4, "DPO loss grad_check (theta, phi)")
    toks = batch["winners"][0]
    lp = nc.grad_check(lambda p: sequence_log_prob(pol.pcfg, p, toks, lang.prompt_len).sum(),
                       pol.params.sub("policy"), probe_count=96)
    c.add(lp < 1e-4, "sequence log-prob grad_check")


def test_criterion_6_np_dpo():
    rep, secs = run_preset("np-dpo-toy")
    c = Checks(6, "NP-DPO toy")
    for r in rep.tables["dpo_training"]:
        c.add(abs(r["initial_loss"] - math.log(2)) <= 1e-6, f"{r['model']} initial loss - ln2 = {r['initial_loss_minus_ln2']:.1e}")
    for z in ("0", "1"):
        b = one(rep, "accuracy", model="btl_dpo", n_context=0, z_star=z)["accuracy_mean"]
        c.add(abs(b - 0.5) <= 0.07, f"BTL-DPO mode {z}: {b:.3f} in 0.50+-0.07")
    a0 = one(rep, "accuracy", model="np_dpo", n_context=0, z_star="all")["accuracy_mean"]
    a6 = one(rep, "accuracy", model="np_dpo", n_context=6, z_star="all")["accuracy_mean"]
    c.add(a6 - a0 >= 0.15, f"NP-DPO N^C=6 {a6:.3f} - N^C=0 {a0:.3f} >= 0.15")
    _dpo_grad_checks(c)
    c.budget(secs, 1800)
    c.finish()


def test_criterion_7_embeddings():
    rep, secs = run_preset("hh-proxy-2mode")
    c = Checks(7, "context embeddings separate user types")
    s1 = one(rep, "silhouette", n_context=1)
    s10 = one(rep, "silhouette", n_context=10)
    gap = s10["silhouette"] - s1["silhouette"]
    c.add(gap > 3 * combined(s1["silhouette_stderr"], s10["silhouette_stderr"]),
          f"silhouette N^C=1 {s1['silhouette']:.3f} -> N^C=10 {s10['silhouette']:.3f} (3 sigma)")
    c.add(min(s1["n_points"], s10["n_points"]) >= 500, ">= 500 tasks")
    # stored coordinates carry the eigenvalues as their variances
    for s in (s1, s10):
        pts = np.array([[r["pc1"], r["pc2"]] for r in rows(rep, "pca", n_context=s["n_context"])])
        cov = np.cov(pts.T)
        ok = abs(cov[0, 0] - s["eigenvalue1"]) <= 1e-6 * max(1, s["eigenvalue1"]) and abs(cov[0, 1]) <= 1e-6 * max(1, s["eigenvalue1"])
        c.add(ok, f"N^C={s['n_context']} projected variances match eigenvalues")
    # power iteration against a dense symmetric eigensolver on encoder outputs
    cfg = preset("hh-proxy-2mode")
    spec = cfg.population
    model = create_model("np_btl", RewardModelConfig(option_dim=spec.option_dim, **cfg.model_config), np.random.default_rng(0))
    pools = build_pool(spec, 0)
    tasks = sample_tasks(pools["test"], spec, REWARD_TASK_CONFIG, 300, 0, n_context=5)
    b = stack_tasks(tasks)
    with torch.no_grad():
        z = model.encode(b["ctx_w"], b["ctx_l"]).numpy()
    proj = pca_project(z, 2)
    zc = z - z.mean(axis=0)
    vals, vecs = np.linalg.eigh(zc.T @ zc / (len(z) - 1))
    vals, vecs = vals[::-1][:2], vecs[:, ::-1][:, :2]
    c.add(np.allclose(proj.eigenvalues, vals, atol=1e-6, rtol=0), "eigenvalues within 1e-6 of dense oracle")
    c.add(all(abs(abs(proj.components[i] @ vecs[:, i]) - 1) <= 1e-6 for i in range(2)),
          "eigenvectors within 1e-6 of dense oracle")
    c.finish()


def test_criterion_8_three_mode_and_dirichlet():
    rep, secs3 = run_preset("hht-proxy-3mode")
    c = Checks(8, "three-mode proxy and Dirichlet binning")
    for z in ("0", "1", "2"):
        n = one(rep, "accuracy", model="np_btl", n_context=10, z_star=z)["accuracy_mean"]
        d = one(rep, "accuracy", model=f"btl_mode{z}", n_context=10, z_star=z)["accuracy_mean"]
        c.add(abs(n - d) <= 0.03, f"mode {z}: NP-BTL {n:.3f} vs per-mode BTL {d:.3f} (+-0.03)")
    drep, secs2 = run_preset("dirichlet-2d")
    bins = sorted({r["bin"] for r in drep.tables["simplex_bins"]}, key=int)
    better = 0
    for b in bins:
        lo = one(drep, "simplex_bins", model="np_btl", n_context=0, bin=b)["accuracy_mean"]
        hi = one(drep, "simplex_bins", model="np_btl", n_context=10, bin=b)["accuracy_mean"]
        better += hi > lo
    c.add(len(bins) == 10 and better >= 8, f"Dirichlet 2D: improves in {better} of {len(bins)} bins (>= 8)")
    c.finish()


def test_criterion_9_scaling():
    rep, _ = run_preset("scaling-bench")
    c = Checks(9, "encoder scales linearly, decoder flat")
    fits = {r["quantity"]: r for r in rep.runtime["scaling_fit"]}
    grid = [r["n_context"] for r in rep.runtime["scaling"]]
    c.add(fits["encode_seconds"]["r_squared"] >= 0.95, f"encoder R^2 {fits['encode_seconds']['r_squared']:.4f} >= 0.95")
    dec = np.array([r["decode_seconds"] for r in rep.runtime["scaling"]])
    drift = abs(fits["decode_seconds"]["slope"]) * (max(grid) - min(grid))
    c.add(drift <= 0.2 * float(np.median(dec)),
          f"decoder fitted drift {drift * 1e3:.3f} ms <= 20% of median {np.median(dec) * 1e3:.3f} ms")
    c.add(min(grid) == 1 and max(grid) == 512, "grid spans 1..512")
    c.finish()


def _substrate_checks(c: Checks) -> None:
    rng = np.random.default_rng(0)

    def check(name, fn, params, **kw):
        err = nc.grad_check(fn, params, rng=np.random.default_rng(1), **kw)
        c.add(err < 1e-4, f"{name} {err:.1e}")

    x = nc.as_tensor(rng.standard_normal((4, 6)))
    w = torch.arange(6.0, dtype=torch.float64)
    p = nc.ParamSet()
    p["x"] = x
    check("sigmoid", lambda q: (nc.sigmoid(q["x"]) * w).sum(), p)
    check("log_sigmoid", lambda q: (nc.log_sigmoid(q["x"]) * w).sum(), p)
    check("gelu", lambda q: (nc.gelu(q["x"]) * w).sum(), p)
    check("softmax", lambda q: (nc.softmax(q["x"]) * w).sum(), p)
    check("log_softmax", lambda q: (nc.log_softmax(q["x"]) * w).sum(), p)
    check("layer_norm", lambda q: (nc.layer_norm(q, x) * w).sum(), nc.layer_norm_init(6))
    lin = nc.linear_init(rng, 6, 3)
    check("linear", lambda q: nc.linear(q, x).pow(2).sum(), lin)
    spec = nc.MLPSpec(6, 2, 16, 2)
    check("mlp", lambda q: nc.mlp_forward(spec, q, x).pow(2).sum(), nc.mlp_init(spec, rng))
    aspec = nc.AttentionSpec(8, 2, 0.0)
    seq = nc.as_tensor(rng.standard_normal((5, 8)))
    ap = nc.attention_init(aspec, rng)
    check("attention", lambda q: nc.multihead_attention(aspec, q, seq).pow(2).sum(), ap)
    check("causal attention", lambda q: nc.multihead_attention(aspec, q, seq, causal=True).pow(2).sum(), ap)
    film_p = nc.ParamSet()
    film_p["g"] = rng.standard_normal((2, 8))
    film_p["b"] = rng.standard_normal((2, 8))
    o = nc.as_tensor(rng.standard_normal((2, 3, 8)))
    check("film_modulate", lambda q: film_modulate(o, FiLMParams([q["g"]], [q["b"]]), 0).pow(2).sum(), film_p)
    pcfg = PolicyConfig(vocab_size=16, seq_len=12, model_dim=16, n_blocks=2, num_heads=2, ffn_dim=32)
    from prefnp.policy import policy_init

    toks = torch.as_tensor(rng.integers(0, 16, (3, 12)))
    check("sequence_log_prob", lambda q: sequence_log_prob(pcfg, q, toks, 4).sum(), policy_init(pcfg, rng),
          probe_count=96)
    gspec = preset("example-3-1").population
    pools = build_pool(gspec, 0)
    tasks = [t for t in sample_tasks(pools["train"], gspec, REWARD_TASK_CONFIG, 50, 0) if t.n_context == 4][:3]
    for kind, enc in (("btl", "deepset"), ("dpl", "deepset"), ("np_btl", "deepset"), ("np_btl", "attention")):
        m = create_model(kind, RewardModelConfig(1, hidden_dim=16, latent_dim=8, encoder=enc, num_heads=2, dropout_rate=0.0),
                         np.random.default_rng(2))
        batch = stack_tasks(tasks, with_context=kind == "np_btl")

        def loss(q, m=m, batch=batch):
            m.params = q
            return m.loss(batch)

        check(f"{kind}/{enc} loss", loss, m.params.copy(), probe_count=64)
    _dpo_grad_checks(c)


def _metric_bytes(out: Path) -> dict:
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*"))
            if p.is_file() and "runtime" not in p.relative_to(out).parts}


def test_criterion_10_substrate_and_determinism(tmp_path):
    c = Checks(10, "gradients and byte-identical reruns")
    _substrate_checks(c)
    for name in ("example-3-1", "hh-proxy-2mode", "bayes-curve", "conflict-sweep", "dirichlet-2d", "np-dpo-toy"):
        d = preset(name).to_dict()
        d["population"].update(n_train=400, n_val=100, n_test=100)
        d["train"].update(max_steps=4, n_val_tasks=10)
        d["eval"]["n_test_tasks"] = 20
        opts = d["options"]
        if "n_trials" in opts:
            opts["n_trials"] = 100
        if "rho_train_grid" in opts:
            opts["rho_train_grid"] = [-1.0, 0.0]
        if "train_rates" in opts:
            opts["train_rates"] = [1.0, 0.5]
        if "steer_samples" in opts:
            opts["steer_samples"] = 8
        d["out_dir"] = str(tmp_path / name)
        cfg = ExperimentConfig.from_dict(d)
        run_experiment(cfg)
        first = _metric_bytes(Path(cfg.out_dir))
        run_experiment(cfg)
        c.add(first == _metric_bytes(Path(cfg.out_dir)), f"{name} metric files byte-identical")
    c.finish()

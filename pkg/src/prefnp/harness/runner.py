"""Seeded end-to-end pipelines behind ``run_experiment``."""

from __future__ import annotations

import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .. import __version__
from ..numcore import NumericalError, as_tensor
from ..oracle import np_vs_bayes_curve
from ..policy import PolicyConfig, SteerablePolicy, ToyLanguageSpec, gen_toy_preferences, train_np_dpo
from ..rewards import (
    NPBTLModel,
    RewardModelConfig,
    create_model,
    evaluate_accuracy,
    latent_label,
    stack_tasks,
    task_accuracies,
    train_reward,
)
from ..synthdata import PopulationSpec, TaskConfig, build_pool, discrete, sample_tasks
from .analysis import pca_project, silhouette_values
from .bench import bench_scaling, linear_fit
from .config import ExperimentConfig, substream
from .report import Report, emit_plot_data, write_report

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the error."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(exc).__name__}: {exc}")
        self.stage = stage
        self.original = exc


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, et, ev, tb):
        if ev is not None and not isinstance(ev, StageError):
            raise StageError(self.name, ev) from ev
        return False


def _model_config(cfg: ExperimentConfig, spec: PopulationSpec) -> RewardModelConfig:
    return RewardModelConfig(option_dim=spec.option_dim, **cfg.model_config)


def _train(cfg: ExperimentConfig, kind: str, pools, spec: PopulationSpec, tag: str, z_star=None):
    tcfg = replace(cfg.train, seed=substream(cfg.seed, f"train:{tag}"))
    with _Stage(f"train {tag}"):
        return train_reward(kind, pools, spec, tcfg, cfg.task, _model_config(cfg, spec), z_star=z_star)


def _test_tasks(cfg: ExperimentConfig, pool, spec: PopulationSpec, n_context: int, context_pool=None, stream: int = 0):
    seed = substream(cfg.seed, "eval")
    return sample_tasks(pool, spec, cfg.task, cfg.eval.n_test_tasks, seed, stream=1000 * stream + n_context,
                        n_context=n_context, context_pool=context_pool)


def _accuracy_rows(model, tasks_by_nc: dict, name: str, seed: int) -> list[dict]:
    rows = []
    for nc, tasks in tasks_by_nc.items():
        table = evaluate_accuracy(model, tasks, seed=seed)
        rows += [{"model": name, **r} for r in table["rows"]]
    return rows


def _simplex_bin(w: np.ndarray) -> dict:
    """Bin of a simplex point: 10 bins of z*_0 for k=2, edge-0.1 triangles for k=3."""
    if len(w) == 2:
        i = min(int(math.floor(w[0] * 10)), 9)
        return {"bin": f"{i}", "bin_lo": i / 10, "bin_hi": (i + 1) / 10}
    a, b = w[0] * 10, w[1] * 10
    i, j = int(math.floor(a)), int(math.floor(b))
    i, j = min(i, 9), min(j, 9 - min(i, 9))
    up = (a - i) + (b - j) < 1 or i + j == 9
    c0 = (i + (1 / 3 if up else 2 / 3)) / 10
    c1 = (j + (1 / 3 if up else 2 / 3)) / 10
    return {"bin": f"{i},{j},{'up' if up else 'down'}", "centroid0": c0, "centroid1": c1, "centroid2": 1 - c0 - c1}


def _simplex_rows(model, tasks_by_nc: dict, name: str, seed: int) -> list[dict]:
    rows = []
    for nc, tasks in tasks_by_nc.items():
        acc = task_accuracies(model, tasks, seed)
        groups: dict[str, list] = {}
        meta = {}
        for a, t in zip(acc, tasks):
            if np.isnan(a):
                continue
            b = _simplex_bin(np.asarray(t.z_star.weights))
            groups.setdefault(b["bin"], []).append(a)
            meta[b["bin"]] = b
        for key in sorted(groups, key=lambda k: [int(p) if p.isdigit() else p for p in k.split(",")]):
            v = np.asarray(groups[key])
            se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
            rows.append({"model": name, "n_context": nc, **meta[key], "n_tasks": len(v),
                         "accuracy_mean": float(v.mean()), "accuracy_stderr": se})
    return rows


def _embedding_rows(model: NPBTLModel, cfg: ExperimentConfig, pool, spec, grid) -> tuple[list[dict], list[dict]]:
    pca_rows, sil_rows = [], []
    for nc in grid:
        tasks = _test_tasks(cfg, pool, spec, nc, stream=7)
        batch = stack_tasks(tasks)
        with torch.no_grad():
            z = model.encode(batch["ctx_w"], batch["ctx_l"]).numpy()
        labels = [latent_label(t.z_star) for t in tasks]
        proj = pca_project(z, 2)
        for i, (lab, c) in enumerate(zip(labels, proj.coords)):
            pca_rows.append({"n_context": nc, "task": i, "z_star": lab, "pc1": float(c[0]), "pc2": float(c[1])})
        s = silhouette_values(proj.coords, labels)
        total = float(proj.eigenvalues.sum())
        sil_rows.append({
            "n_context": nc,
            "n_points": len(s),
            "silhouette": float(s.mean()),
            "silhouette_stderr": float(s.std(ddof=1) / math.sqrt(len(s))),
            "eigenvalue1": float(proj.eigenvalues[0]),
            "eigenvalue2": float(proj.eigenvalues[1]) if len(proj.eigenvalues) > 1 else 0.0,
            "top2_share": total / float(np.trace(np.cov(z.T))) if z.std() > 0 else 0.0,
        })
    return pca_rows, sil_rows


# ---------------------------------------------------------------------------
# pipelines


def _run_accuracy(cfg: ExperimentConfig, rep: Report) -> None:
    spec = cfg.population
    opts = cfg.options
    eval_seed = substream(cfg.seed, "eval:order")
    with _Stage("generate"):
        pools = build_pool(spec, substream(cfg.seed, "data"))
        tasks = {nc: _test_tasks(cfg, pools["test"], spec, nc) for nc in cfg.eval.n_context_grid}
    rows, simplex, results = [], [], {}
    for kind in [cfg.model] + list(opts.get("baselines", [])):
        res = _train(cfg, kind, pools, spec, kind)
        results[kind] = res
        rep.runtime.setdefault("training", []).append(
            {"model": kind, "best_step": res.best_step, "best_val_loss": min(v for _, v in res.val_loss)})
        with _Stage(f"evaluate {kind}"):
            rows += _accuracy_rows(res.model, tasks, kind, eval_seed)
            if spec.family == "dirichlet":
                simplex += _simplex_rows(res.model, tasks, kind, eval_seed)
    if opts.get("per_mode_btl"):
        for z in range(spec.n_latents):
            name = f"btl_mode{z}"
            res = _train(cfg, "btl", pools, spec, name, z_star=discrete(z))
            with _Stage(f"evaluate {name}"):
                only = {nc: [t for t in ts if t.z_star.index == z] for nc, ts in tasks.items()}
                rows += [r for r in _accuracy_rows(res.model, only, name, eval_seed) if r["z_star"] == str(z)]
    rep.add_table("accuracy", rows)
    if simplex:
        rep.add_table("simplex_bins", simplex)
    grid = opts.get("embedding_grid")
    if grid and cfg.model == "np_btl":
        with _Stage("embeddings"):
            pca_rows, sil_rows = _embedding_rows(results[cfg.model].model, cfg, pools["test"], spec, grid)
        rep.add_table("pca", pca_rows)
        rep.add_table("silhouette", sil_rows)


def _run_bayes_curve(cfg: ExperimentConfig, rep: Report) -> None:
    opts = cfg.options
    rows = []
    for rho_tr in opts.get("rho_train_grid", [-1.0, -0.7, 0.0, 0.7]):
        spec = replace(cfg.population, family="gaussian2d", rho=float(rho_tr))
        tag = f"rho{rho_tr:+.2f}"
        with _Stage(f"generate {tag}"):
            pools = build_pool(spec, substream(cfg.seed, f"data:{tag}"))
        res = _train(cfg, "np_btl", pools, spec, tag)
        with _Stage(f"oracle curve {tag}"):
            rows += np_vs_bayes_curve(res.model, opts.get("rho_eval_grid", [-1.0, -0.5, 0.0, 0.5, 1.0]),
                                      int(opts.get("n_trials", 2000)), seed=substream(cfg.seed, "eval:curve"),
                                      rho_train=float(rho_tr), n_probe=int(opts.get("n_probe", 20)))
    rep.add_table("error_curves", rows)
    rep.notes.append("np_error: share of single-pair contexts where the latent agreeing with the model on most "
                     "of n_probe fresh pairs differs from z*")


def _run_conflict_sweep(cfg: ExperimentConfig, rep: Report) -> None:
    opts = cfg.options
    base = cfg.population
    eval_task = TaskConfig(int(opts.get("eval_nc_min", 1)), int(opts.get("eval_nc_max", 10)), cfg.task.n_target)
    with _Stage("generate evaluation pools"):
        target = build_pool(replace(base, conflict_filter=1.0), substream(cfg.seed, "data:target"))["test"]
        contexts = {}
        for c in opts.get("context_rates", [1.0, 0.75, 0.5, 0.25]):
            contexts[c] = build_pool(replace(base, conflict_filter=float(c)), substream(cfg.seed, f"data:context:{c}"))["test"]
    rows = []
    eval_seed = substream(cfg.seed, "eval")
    for r in opts.get("train_rates", [1.0, 0.75, 0.5]):
        spec = replace(base, conflict_filter=float(r))
        tag = f"conflict{r:.2f}"
        with _Stage(f"generate {tag}"):
            pools = build_pool(spec, substream(cfg.seed, f"data:{tag}"))
        res = _train(cfg, cfg.model, pools, spec, tag)
        with _Stage(f"evaluate {tag}"):
            for i, (c, ctx) in enumerate(contexts.items()):
                tasks = sample_tasks(target, spec, eval_task, cfg.eval.n_test_tasks, eval_seed, stream=i,
                                     context_pool=ctx)
                table = evaluate_accuracy(res.model, tasks, by_n_context=False, by_z=False,
                                          seed=substream(cfg.seed, "eval:order"))
                row = table["rows"][0]
                rows.append({"train_rate": float(r), "context_rate": float(c), "n_tasks": row["n_tasks"],
                             "accuracy_mean": row["accuracy_mean"], "accuracy_stderr": row["accuracy_stderr"]})
    rep.add_table("conflict_sweep", rows)


def _run_np_dpo(cfg: ExperimentConfig, rep: Report) -> None:
    opts = cfg.options
    lang = ToyLanguageSpec(**opts.get("language", {}))
    spec = lang.population()
    pcfg = PolicyConfig(vocab_size=lang.vocab_size, seq_len=lang.seq_len, **opts.get("policy", {}))
    hcfg = RewardModelConfig(option_dim=lang.vocab_size, **{"hidden_dim": 64, "latent_dim": 64, **cfg.model_config})
    with _Stage("generate"):
        ref = SteerablePolicy.create(lang, np.random.default_rng(substream(cfg.seed, "init:ref")), conditional=False,
                                     pcfg=pcfg)
        sizes = {"train": cfg.population.n_train, "val": cfg.population.n_val, "test": cfg.population.n_test}
        pools = gen_toy_preferences(lang, ref, sizes, np.random.default_rng(substream(cfg.seed, "data")),
                                    cfg.population.conflict_filter)
        tasks = {nc: _test_tasks(cfg, pools["test"], spec, nc) for nc in cfg.eval.n_context_grid}
    rows, train_rows, policies = [], [], {}
    eval_seed = substream(cfg.seed, "eval:order")
    for kind in ("np_dpo", "btl_dpo"):
        dcfg = replace(cfg.train, seed=substream(cfg.seed, f"train:{kind}"))
        with _Stage(f"train {kind}"):
            res = train_np_dpo(lang, pools, dcfg, cfg.task, conditional=kind == "np_dpo",
                               ref_params=ref.ref_params, pcfg=pcfg, hcfg=hcfg)
        policies[kind] = res.policy
        train_rows.append({"model": kind, "initial_loss": res.initial_loss, "initial_loss_minus_ln2":
                           res.initial_loss - math.log(2), "best_step": res.best_step,
                           "best_val_loss": min(v for _, v in res.val_loss)})
        with _Stage(f"evaluate {kind}"):
            rows += _accuracy_rows(res.policy, tasks, kind, eval_seed)
    rep.add_table("accuracy", rows)
    rep.add_table("dpo_training", train_rows)
    with _Stage("steering"):
        rep.add_table("steering", _steering_rows(policies["np_dpo"], pools["test"], spec, cfg, lang))


def _steering_rows(policy: SteerablePolicy, pool, spec, cfg: ExperimentConfig, lang: ToyLanguageSpec) -> list[dict]:
    from ..policy import sample_response
    from ..synthdata import sample_task

    n_ctx = int(cfg.options.get("steer_context", cfg.task.nc_max))
    n = int(cfg.options.get("steer_samples", 200))
    rng = np.random.default_rng(substream(cfg.seed, "eval:steer"))
    x = rng.integers(0, lang.vocab_size, size=lang.prompt_len)
    rows = []
    for z in range(lang.n_attributes):
        t = sample_task(pool, spec, cfg.task, rng, n_context=n_ctx, z_star=discrete(z))
        ctx = [(w.astype(int), l.astype(int)) for w, l in zip(t.context_winners, t.context_losers)]
        ys = sample_response(policy, x, ctx, 1.0, rng, n=n)
        h = lang.scores(ys)
        rows.append({"context_z": z, "n_context": n_ctx, "n_samples": n,
                     **{f"mean_h{k}": float(h[:, k].mean()) for k in range(lang.n_attributes)}})
    return rows


def _run_scaling(cfg: ExperimentConfig, rep: Report) -> None:
    opts = cfg.options
    mcfg = _model_config(cfg, cfg.population)
    model = create_model("np_btl", mcfg, np.random.default_rng(substream(cfg.seed, "init")))
    torch.set_num_threads(1)
    with _Stage("bench"):
        rows = bench_scaling(model, opts.get("nc_grid", [1, 64, 128, 192, 256, 320, 384, 448, 512]),
                             int(opts.get("n_target", cfg.task.n_target)), int(opts.get("repeats", 7)),
                             int(opts.get("batch", 8)), seed=substream(cfg.seed, "bench"))
    rep.add_table("scaling", rows, runtime=True)
    nc = [r["n_context"] for r in rows]
    fits = []
    for col in ("encode_seconds", "decode_seconds", "total_seconds"):
        a, b, r2 = linear_fit(nc, [r[col] for r in rows])
        fits.append({"quantity": col, "intercept": a, "slope": b, "r_squared": r2})
    rep.add_table("scaling_fit", fits, runtime=True)


PIPELINES = {
    "accuracy": _run_accuracy,
    "bayes-curve": _run_bayes_curve,
    "conflict-sweep": _run_conflict_sweep,
    "np-dpo": _run_np_dpo,
    "scaling": _run_scaling,
}


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> Report:
    """Run one configured experiment and, if ``write``, store its report in ``cfg.out_dir``."""
    rep = Report(cfg.to_dict(), cfg.config_hash(), cfg.seed, __version__)
    PIPELINES[cfg.pipeline](cfg, rep)
    if write:
        with _Stage("write report"):
            write_report(rep, cfg.out_dir)
            manifest = emit_plot_data(rep, cfg.out_dir)
            rep.notes.extend(f"{k}: {v}" for k, v in manifest["omitted"].items())
    return rep

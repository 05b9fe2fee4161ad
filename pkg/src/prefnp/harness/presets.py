"""Named experiment presets, one per reproduced figure or table."""

from __future__ import annotations

from ..policy import DPOConfig
from ..rewards import TrainConfig
from ..synthdata import POLICY_TASK_CONFIG, REWARD_TASK_CONFIG, PopulationSpec, TaskConfig
from .config import EvalConfig, ExperimentConfig

ATTENTION = {"encoder": "attention", "num_heads": 8, "dropout_rate": 0.1}


def _example_3_1() -> ExperimentConfig:
    return ExperimentConfig(
        experiment_id="example-3-1",
        population=PopulationSpec(family="piecewise1d", support=(0.0, 1.0)),
        task=REWARD_TASK_CONFIG,
        model="np_btl",
        train=TrainConfig(batch_tasks=64, max_steps=300, learning_rate=1e-3, val_every=10),
        eval=EvalConfig(500, [0, 1, 3, 5, 10]),
        options={"baselines": ["btl", "dpl"]},
    )


def _hh_proxy_2mode() -> ExperimentConfig:
    return ExperimentConfig(
        experiment_id="hh-proxy-2mode",
        population=PopulationSpec(family="kmode", k=2, feature_dim=8, conflict_filter=1.0),
        task=REWARD_TASK_CONFIG,
        model="np_btl",
        train=TrainConfig(batch_tasks=64, max_steps=450, learning_rate=1e-4, val_every=10),
        model_config=dict(ATTENTION),
        eval=EvalConfig(500, [0, 1, 3, 5, 10]),
        options={"baselines": ["btl"], "embedding_grid": [1, 3, 5, 10]},
    )


def _hht_proxy_3mode() -> ExperimentConfig:
    cfg = _hh_proxy_2mode()
    cfg.experiment_id = "hht-proxy-3mode"
    cfg.population = PopulationSpec(family="kmode", k=3, feature_dim=8, conflict_filter=1.0)
    cfg.options = {"baselines": ["btl"], "per_mode_btl": True, "embedding_grid": [1, 3, 5, 10]}
    return cfg


def _bayes_curve() -> ExperimentConfig:
    return ExperimentConfig(
        experiment_id="bayes-curve",
        pipeline="bayes-curve",
        population=PopulationSpec(family="gaussian2d"),
        task=REWARD_TASK_CONFIG,
        model="np_btl",
        train=TrainConfig(batch_tasks=64, max_steps=300, learning_rate=1e-3, val_every=10),
        options={
            "rho_train_grid": [-1.0, -0.7, 0.0, 0.7],
            "rho_eval_grid": [-1.0, -0.5, 0.0, 0.5, 1.0],
            "n_trials": 2000,
            "n_probe": 20,
        },
    )


def _conflict_sweep() -> ExperimentConfig:
    return ExperimentConfig(
        experiment_id="conflict-sweep",
        pipeline="conflict-sweep",
        population=PopulationSpec(family="kmode", k=2, feature_dim=8, conflict_filter=1.0),
        task=REWARD_TASK_CONFIG,
        model="np_btl",
        train=TrainConfig(batch_tasks=64, max_steps=450, learning_rate=1e-4, val_every=10),
        model_config=dict(ATTENTION),
        eval=EvalConfig(500, [1, 10]),
        options={
            "train_rates": [1.0, 0.75, 0.5],
            "context_rates": [1.0, 0.75, 0.5, 0.25],
            "eval_nc_min": 1,
            "eval_nc_max": 10,
        },
    )


def _dirichlet(k: int) -> ExperimentConfig:
    return ExperimentConfig(
        experiment_id=f"dirichlet-{k}d",
        population=PopulationSpec(family="dirichlet", k=k, feature_dim=8, alpha=(0.5,) * k, conflict_filter=1.0),
        task=REWARD_TASK_CONFIG,
        model="np_btl",
        train=TrainConfig(batch_tasks=64, max_steps=450, learning_rate=1e-4, val_every=10),
        model_config=dict(ATTENTION),
        eval=EvalConfig(1000 if k == 2 else 2000, [0, 1, 3, 5, 10]),
    )


def _np_dpo_toy() -> ExperimentConfig:
    return ExperimentConfig(
        experiment_id="np-dpo-toy",
        pipeline="np-dpo",
        population=PopulationSpec(family="kmode", k=2, feature_dim=12, conflict_filter=1.0,
                                  n_train=4000, n_val=1000, n_test=1000),
        task=POLICY_TASK_CONFIG,
        model="np_dpo",
        train=DPOConfig(beta=0.05, learning_rate=1e-4, batch_tasks=8, max_steps=400, n_val_tasks=100, val_every=25),
        eval=EvalConfig(300, [0, 1, 2, 3, 4, 5, 6]),
        options={
            "language": {"vocab_size": 16, "prompt_len": 4, "response_len": 8, "n_attributes": 2,
                         "weight_correlation": -1.0, "seed": 0},
            "steer_samples": 200,
        },
    )


def _scaling_bench() -> ExperimentConfig:
    return ExperimentConfig(
        experiment_id="scaling-bench",
        pipeline="scaling",
        population=PopulationSpec(family="gaussian2d"),
        task=TaskConfig(0, 10, 20),
        model="np_btl",
        options={"nc_grid": [1, 64, 128, 192, 256, 320, 384, 448, 512], "n_target": 20, "repeats": 9, "batch": 8},
    )


PRESETS = {
    "example-3-1": _example_3_1,
    "hh-proxy-2mode": _hh_proxy_2mode,
    "hht-proxy-3mode": _hht_proxy_3mode,
    "bayes-curve": _bayes_curve,
    "conflict-sweep": _conflict_sweep,
    "dirichlet-2d": lambda: _dirichlet(2),
    "dirichlet-3d": lambda: _dirichlet(3),
    "np-dpo-toy": _np_dpo_toy,
    "scaling-bench": _scaling_bench,
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name]()
    cfg.out_dir = f"runs/{name}"
    return cfg

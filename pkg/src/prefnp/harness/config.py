"""Experiment configuration and its JSON file format."""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..policy import DPOConfig
from ..rewards import TrainConfig
from ..synthdata import PopulationSpec, TaskConfig

MODELS = ("btl", "dpl", "np_btl", "np_dpo", "btl_dpo")
PIPELINES = ("accuracy", "bayes-curve", "conflict-sweep", "np-dpo", "scaling")


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    n_test_tasks: int = 500
    n_context_grid: list[int] = field(default_factory=lambda: [0, 1, 3, 5, 10])

    def __post_init__(self):
        if self.n_test_tasks < 2:
            raise ConfigError("n_test_tasks must be at least 2")
        self.n_context_grid = [int(n) for n in self.n_context_grid]


@dataclass
class ExperimentConfig:
    """One experiment. ``options`` holds pipeline-specific knobs (grids, baselines)."""

    experiment_id: str
    pipeline: str = "accuracy"
    population: PopulationSpec = field(default_factory=PopulationSpec)
    task: TaskConfig = field(default_factory=TaskConfig)
    model: str = "np_btl"
    train: TrainConfig | DPOConfig = field(default_factory=TrainConfig)
    model_config: dict = field(default_factory=dict)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs"
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        want = DPOConfig if self.model in ("np_dpo", "btl_dpo") else TrainConfig
        if not isinstance(self.train, want):
            raise ConfigError(f"model {self.model} needs a {want.__name__} train section")

    def to_dict(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "pipeline": self.pipeline,
            "population": self.population.to_dict(),
            "task": asdict(self.task),
            "model": self.model,
            "train": asdict(self.train),
            "model_config": dict(self.model_config),
            "eval": asdict(self.eval),
            "seed": self.seed,
            "out_dir": self.out_dir,
            "options": json.loads(json.dumps(self.options)),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "experiment_id" not in d:
            raise ConfigError("config needs an experiment_id")
        try:
            model = d.get("model", "np_btl")
            train_cls = DPOConfig if model in ("np_dpo", "btl_dpo") else TrainConfig
            return cls(
                experiment_id=str(d["experiment_id"]),
                pipeline=d.get("pipeline", "accuracy"),
                population=PopulationSpec.from_dict(d.get("population", {})),
                task=TaskConfig(**d.get("task", {})),
                model=model,
                train=train_cls(**d.get("train", {})),
                model_config=dict(d.get("model_config", {})),
                eval=EvalConfig(**d.get("eval", {})),
                seed=int(d.get("seed", 0)),
                out_dir=str(d.get("out_dir", "runs")),
                options=dict(d.get("options", {})),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())

    def config_hash(self) -> str:
        """Short digest of everything that affects results (``out_dir`` excluded)."""
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def with_overrides(self, seed: int | None = None, out_dir: str | None = None) -> "ExperimentConfig":
        d = self.to_dict()
        if seed is not None:
            d["seed"] = seed
        if out_dir is not None:
            d["out_dir"] = out_dir
        return ExperimentConfig.from_dict(d)


def substream(seed: int, name: str) -> int:
    """Integer seed of the named substream under a root seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))

"""Command-line entry point: ``prefnp <command> [--config FILE | --preset NAME] ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .harness.config import ConfigError, ExperimentConfig, substream
from .harness.presets import PRESETS, preset
from .harness.report import Report, emit_plot_data, table_text, write_report
from .harness.runner import StageError, run_experiment
from .numcore import ModelCheckpoint, NumericalError, ShapeError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("prefnp")


def _load_config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    elif args.preset:
        try:
            cfg = preset(args.preset)
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        raise ConfigError("one of --config or --preset is required")
    return cfg.with_overrides(seed=args.seed, out_dir=args.out)


def _report(cfg: ExperimentConfig) -> Report:
    from . import __version__

    return Report(cfg.to_dict(), cfg.config_hash(), cfg.seed, __version__)


def _pools(cfg: ExperimentConfig):
    from .synthdata import build_pool

    return build_pool(cfg.population, substream(cfg.seed, "data"))


def cmd_generate(cfg: ExperimentConfig, args) -> None:
    from .synthdata import sample_tasks, write_pool, write_tasks

    out = Path(cfg.out_dir)
    pools = _pools(cfg)
    write_pool(out / "pool.jsonl", pools)
    tasks = sample_tasks(pools["test"], cfg.population, cfg.task, cfg.eval.n_test_tasks, substream(cfg.seed, "eval"))
    write_tasks(out / "test_tasks.jsonl", tasks)
    print(f"wrote {out / 'pool.jsonl'} and {out / 'test_tasks.jsonl'}")


def cmd_train_reward(cfg: ExperimentConfig, args) -> None:
    from .harness.runner import _train

    pools = _pools(cfg)
    res = _train(cfg, cfg.model, pools, cfg.population, cfg.model)
    path = Path(cfg.out_dir) / f"{cfg.model}.ckpt.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    res.checkpoint.save(path)
    print(f"wrote {path} (best step {res.best_step})")


def cmd_train_policy(cfg: ExperimentConfig, args) -> None:
    from .harness.runner import _run_np_dpo

    rep = _report(cfg)
    _run_np_dpo(cfg, rep)
    write_report(rep, cfg.out_dir)
    emit_plot_data(rep, cfg.out_dir)
    print(f"wrote policy report to {cfg.out_dir}")


def _load_model(path):
    from .policy import SteerablePolicy
    from .rewards import model_from_checkpoint

    ckpt = ModelCheckpoint.load(path)
    if ckpt.model_kind in ("np_dpo", "btl_dpo"):
        return SteerablePolicy.from_checkpoint(ckpt)
    return model_from_checkpoint(ckpt)


def cmd_eval(cfg: ExperimentConfig, args) -> None:
    from .harness.runner import _accuracy_rows, _test_tasks

    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    model = _load_model(args.checkpoint)
    pools = _pools(cfg)
    tasks = {nc: _test_tasks(cfg, pools["test"], cfg.population, nc) for nc in cfg.eval.n_context_grid}
    rep = _report(cfg)
    rep.add_table("accuracy", _accuracy_rows(model, tasks, model.kind, substream(cfg.seed, "eval:order")))
    write_report(rep, cfg.out_dir)
    emit_plot_data(rep, cfg.out_dir)
    sys.stdout.write(table_text("accuracy", rep.tables["accuracy"]))


def cmd_oracle(cfg: ExperimentConfig, args) -> None:
    from .oracle import closed_form_error, mc_error_estimate

    grid = cfg.options.get("rho_eval_grid", [-1.0, -0.9, -0.5, 0.0, 0.5, 0.9, 1.0])
    n = int(cfg.options.get("n_trials", 100_000))
    rows = []
    for i, rho in enumerate(grid):
        for nc in cfg.options.get("oracle_n_context", [1]):
            p, se = mc_error_estimate(float(rho), n, int(nc), substream(cfg.seed, f"oracle:{i}:{nc}"))
            rows.append({"rho": float(rho), "n_context": int(nc), "closed_form_error": closed_form_error(rho),
                         "mc_error": p, "mc_stderr": se, "n_trials": n})
    rep = _report(cfg)
    rep.add_table("oracle", rows)
    write_report(rep, cfg.out_dir)
    sys.stdout.write(table_text("oracle", rep.tables["oracle"]))


def cmd_pca(cfg: ExperimentConfig, args) -> None:
    from .harness.runner import _embedding_rows

    if not args.checkpoint:
        raise ConfigError("pca needs --checkpoint")
    model = _load_model(args.checkpoint)
    if model.kind != "np_btl":
        raise ConfigError("pca needs an np_btl checkpoint")
    pools = _pools(cfg)
    grid = cfg.options.get("embedding_grid", [1, 3, 5, 10])
    pca_rows, sil_rows = _embedding_rows(model, cfg, pools["test"], cfg.population, grid)
    rep = _report(cfg)
    rep.add_table("pca", pca_rows)
    rep.add_table("silhouette", sil_rows)
    write_report(rep, cfg.out_dir)
    emit_plot_data(rep, cfg.out_dir)
    sys.stdout.write(table_text("silhouette", rep.tables["silhouette"]))


def cmd_bench(cfg: ExperimentConfig, args) -> None:
    cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "pipeline": "scaling"})
    rep = run_experiment(cfg)
    sys.stdout.write(table_text("scaling_fit", rep.runtime["scaling_fit"]))


def cmd_run(cfg: ExperimentConfig, args) -> None:
    rep = run_experiment(cfg)
    print(f"wrote {len(rep.tables)} metric tables to {cfg.out_dir}")


COMMANDS = {
    "generate": cmd_generate,
    "train-reward": cmd_train_reward,
    "train-policy": cmd_train_policy,
    "eval": cmd_eval,
    "oracle": cmd_oracle,
    "pca": cmd_pca,
    "bench": cmd_bench,
    "run": cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prefnp", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="experiment config file (JSON)")
    p.add_argument("--preset", help=f"named preset: {', '.join(sorted(PRESETS))}")
    p.add_argument("--seed", type=int, help="override the root seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--checkpoint", help="model checkpoint for eval / pca")
    p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.original
    if isinstance(exc, (ConfigError, KeyError)):
        return EXIT_CONFIG
    if isinstance(exc, (NumericalError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (ValueError, ShapeError, TypeError)):
        return EXIT_CONFIG
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.dump_config:
        sys.stdout.write(cfg.dumps())
        return EXIT_OK
    try:
        COMMANDS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - mapped to documented exit codes
        stage = exc.stage if isinstance(exc, StageError) else args.command
        print(f"error in stage '{stage}': {exc}", file=sys.stderr)
        return _exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

import json

import pytest

from prefnp.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from prefnp.harness import ExperimentConfig, preset


def small_config(tmp_path, name="example-3-1"):
    c = preset(name).to_dict()
    c["population"].update(n_train=300, n_val=80, n_test=80)
    c["train"].update(max_steps=2, n_val_tasks=5)
    c["eval"]["n_test_tasks"] = 10
    c["out_dir"] = str(tmp_path / "out")
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(c))
    return path


def test_dump_config_round_trips(capsys):
    assert main(["run", "--preset", "hh-proxy-2mode", "--seed", "3", "--dump-config"]) == EXIT_OK
    cfg = ExperimentConfig.loads(capsys.readouterr().out)
    assert cfg.seed == 3 and cfg.experiment_id == "hh-proxy-2mode"


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["run"]) == EXIT_CONFIG
    assert main(["run", "--preset", "nope"]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text('{"experiment_id": "x", "unknown": 1}')
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
    assert "unknown" in capsys.readouterr().err


def test_missing_config_file_exit_4(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_IO


def test_eval_without_checkpoint_names_stage(tmp_path, capsys):
    assert main(["eval", "--config", str(small_config(tmp_path))]) == EXIT_CONFIG
    assert "error in stage 'eval'" in capsys.readouterr().err


def test_unwritable_output_exit_4(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    path = small_config(tmp_path)
    assert main(["generate", "--config", str(path), "--out", str(blocker / "sub")]) == EXIT_IO


def test_generate_train_eval_pca(tmp_path, capsys):
    path = small_config(tmp_path, "hh-proxy-2mode")
    out = tmp_path / "out"
    assert main(["generate", "--config", str(path)]) == EXIT_OK
    assert (out / "pool.jsonl").read_text().startswith("prefnp-pool v1")
    assert main(["train-reward", "--config", str(path)]) == EXIT_OK
    ckpt = out / "np_btl.ckpt.json"
    assert ckpt.exists()
    assert main(["eval", "--config", str(path), "--checkpoint", str(ckpt)]) == EXIT_OK
    assert "# prefnp-table v1 accuracy" in capsys.readouterr().out
    assert main(["pca", "--config", str(path), "--checkpoint", str(ckpt)]) == EXIT_OK
    assert (out / "plots" / "fig3_pca.tsv").exists()


def test_oracle_command(tmp_path, capsys):
    path = small_config(tmp_path, "bayes-curve")
    c = json.loads(path.read_text())
    c["options"].update(rho_eval_grid=[-1.0, 0.5], n_trials=2000)
    path.write_text(json.dumps(c))
    assert main(["oracle", "--config", str(path)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "closed_form_error" in text and "mc_error" in text

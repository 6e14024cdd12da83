import os

import numpy as np
import pytest

from lasp.cli import (DEFAULTS, EXIT_DATA, EXIT_OK, EXIT_USAGE, main,
                      parse_config_text, resolve_config)
from lasp.errors import ConfigError, DataError
from lasp.serialization import load_tensors

FAST = ["--set", "center_steps=20", "--set", "epochs=1",
        "--set", "warmup_epochs=0", "--set", "n_base=2", "--set", "n_new=2",
        "--set", "samples_per_class=3", "--set", "test_samples=2",
        "--set", "shots=2", "--set", "batch_size=4", "--set", "groups=2",
        "--set", "templates=6"]


def run(args, tmp_path, name="run"):
    out = tmp_path / name
    return main(args + ["--out", str(out)]), out


# -- config handling -----------------------------------------------------------


def test_parse_config_text():
    cfg = parse_config_text("# comment\nlr = 0.5\n\nepochs=3  # trailing\n")
    assert cfg == {"lr": "0.5", "epochs": "3"}
    with pytest.raises(ConfigError):
        parse_config_text("not a pair")


def test_resolve_config_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("lr = 0.5\nseed = 7\n")
    cfg = resolve_config(str(path), ["lr=0.25"], seed=9)
    assert cfg["lr"] == "0.25"
    assert cfg["seed"] == "9"
    assert cfg["epochs"] == DEFAULTS["epochs"]


def test_resolve_config_unknown_key():
    with pytest.raises(ConfigError):
        resolve_config(None, ["bogus=1"], None)


def test_resolve_config_missing_file():
    with pytest.raises(DataError):
        resolve_config("/nonexistent/path.cfg", [], None)


# -- commands ------------------------------------------------------------------


def test_train_writes_run_directory(tmp_path):
    code, out = run(["train", "--seed", "0"] + FAST, tmp_path)
    assert code == EXIT_OK
    for artifact in ("config.echo", "checkpoint.bin", "train.log",
                     "report.txt", "report.kv"):
        assert (out / artifact).exists(), artifact
    assert (out / "matrices" / "centroid_distance.txt").exists()
    echo = (out / "config.echo").read_text()
    assert "command = train" in echo and "seed = 0" in echo
    assert "epochs = 1" in echo


def test_train_epochs_zero_checkpoint_equals_init(tmp_path):
    args = ["train", "--seed", "1"] + FAST
    code0, out0 = run(args + ["--set", "epochs=0", "--set", "warmup_epochs=0"],
                      tmp_path, "zero")
    assert code0 == EXIT_OK
    named, _ = load_tensors(out0 / "checkpoint.bin")
    from lasp.cli import RunContext
    # rebuild the untrained prompts the same way the CLI does
    ctx = RunContext(resolve_config(None, FAST[1::2], 1))
    model = ctx.build_model(1)
    assert np.array_equal(named["prompts.vectors"],
                          model.prompt_set.vectors.data)
    assert not named["prompts.bias"].any()


def test_eval_against_checkpoint(tmp_path):
    code, train_out = run(["train", "--seed", "0"] + FAST, tmp_path, "t")
    assert code == EXIT_OK
    code, eval_out = run(["eval", "--seed", "0"] + FAST
                         + ["--set", f"checkpoint={train_out/'checkpoint.bin'}"],
                         tmp_path, "e")
    assert code == EXIT_OK
    train_kv = (train_out / "report.kv").read_text()
    eval_kv = (eval_out / "report.kv").read_text()
    assert train_kv == eval_kv


def test_eval_zero_shot_mode(tmp_path):
    code, out = run(["eval", "--seed", "0"] + FAST + ["--set", "mode=zero-shot"],
                    tmp_path)
    assert code == EXIT_OK
    assert "base_acc" in (out / "report.kv").read_text()


def test_eval_missing_checkpoint_is_data_error(tmp_path):
    code, _ = run(["eval"] + FAST + ["--set", "checkpoint=/missing.bin"],
                  tmp_path)
    assert code == EXIT_DATA


def test_ablate_loss_grid(tmp_path):
    code, out = run(["ablate-loss", "--seed", "0"] + FAST, tmp_path)
    assert code == EXIT_OK
    kv = (out / "report.kv").read_text()
    for kind in ("ce", "l1", "l2"):
        assert f"harmonic_mean, {kind}," in kv


def test_ablate_components_ladder(tmp_path):
    code, out = run(["ablate-components", "--seed", "0"] + FAST, tmp_path)
    assert code == EXIT_OK
    kv = (out / "report.kv").read_text()
    for name in ("baseline", "+text-to-text", "+grouped", "+align", "+virtual"):
        assert f"harmonic_mean, {name}," in kv


def test_distract_reports_drop_and_recovery(tmp_path):
    code, out = run(["distract", "--seed", "0"] + FAST
                    + ["--set", "distractors=2"], tmp_path)
    assert code == EXIT_OK
    kv = (out / "report.kv").read_text()
    assert "distractor_drop" in kv and "distractor_recovered" in kv


def test_report_round_trip(tmp_path, capsys):
    code, out = run(["train", "--seed", "0"] + FAST, tmp_path)
    assert code == EXIT_OK
    capsys.readouterr()
    assert main(["report", "--out", str(out)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "base_acc" in printed


def test_report_without_out_is_usage_error():
    assert main(["report"]) == EXIT_USAGE


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_unknown_config_key_exits_2(tmp_path):
    code, _ = run(["train", "--set", "bogus=1"], tmp_path)
    assert code == EXIT_USAGE


def test_bad_manifest_exits_3(tmp_path):
    code, _ = run(["train", "--set", "manifest=/missing/manifest.json"],
                  tmp_path)
    assert code == EXIT_DATA


def test_out_root_env_respected(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("LASP_OUT_ROOT", str(tmp_path / "root"))
    monkeypatch.chdir(tmp_path)
    code = main(["eval", "--seed", "3"] + FAST + ["--set", "mode=zero-shot"])
    assert code == EXIT_OK
    assert (tmp_path / "root" / "eval-seed3" / "config.echo").exists()

import re

import numpy as np
import pytest

from scoped_dnas.cli import metrics_csv, run
from scoped_dnas.cli.config import ConfigError, RunConfig, parse_config
from scoped_dnas.cli.plot import emit_plot_svg
from scoped_dnas.engine import Trajectory

FAST = ["--preset", "desk", "--set", "synthetic_size=120", "--set", "batch_size=32"]


def test_defaults():
    cfg = parse_config()
    assert cfg.scope == "s" and cfg.epochs == 500 and cfg.batch_size == 64
    assert cfg.weight_lr == 0.05 and cfg.weight_momentum == 0.9 and cfg.weight_decay == 4e-5
    assert cfg.arch_lr == 0.001 and cfg.stop_patience == 20 and cfg.stop_threshold == 0.9
    assert cfg.image_size == 224 and not cfg.small_stem


def test_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nepochs = 7\nseed=3\npreset=desk\n")
    cfg = parse_config(path, {"seed": "11"})
    assert cfg.epochs == 7  # file beats preset
    assert cfg.seed == 11  # flag beats file
    assert cfg.image_size == 32  # preset beats default
    assert parse_config(None, {"epochs": None}).epochs == 500


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("learning_rte=0.1\n")
    with pytest.raises(ConfigError, match="learning_rte"):
        parse_config(path)


def test_type_and_choice_errors():
    with pytest.raises(ConfigError):
        parse_config(None, {"epochs": "many"})
    with pytest.raises(ConfigError):
        parse_config(None, {"scope": "xl"})
    with pytest.raises(ConfigError):
        parse_config(None, {"dataset": "synthetic", "data_dir": "/tmp"})


def test_desk_preset_falls_back_to_synthetic(monkeypatch):
    monkeypatch.delenv("SCOPED_DNAS_DATA", raising=False)
    assert parse_config(None, {"preset": "desk"}).resolved_dataset() == "synthetic"
    assert RunConfig().resolved_dataset() == "cifar10"


def test_resolved_text_is_sorted():
    lines = RunConfig().to_text().splitlines()
    keys = [line.split("=")[0] for line in lines]
    assert keys == sorted(keys)
    assert "command" not in keys


def test_metrics_csv_format():
    text = metrics_csv([{"epoch": 0, "loss": 1 / 3}])
    assert text == "epoch,loss\n0,0.333333333\n"


def test_params_command(capsys):
    assert run(["params"]) == 0
    out = capsys.readouterr().out
    assert "23528522" in out and "23.53M" in out


def test_params_supernet(capsys):
    assert run(["params", "--model", "supernet", "--scope", "f", "--mode", "all-paths"]) == 0
    assert "201379658" in capsys.readouterr().out
    assert run(["params", "--model", "supernet"]) == 2


def test_unknown_set_key_exit_code(tmp_path, capsys):
    assert run(["search", "--out", str(tmp_path), "--set", "learning_rte=1"]) == 2
    assert "learning_rte" in capsys.readouterr().err


def test_missing_artifact_exit_code(tmp_path, capsys):
    assert run(["plot", "--out", str(tmp_path / "nothing")]) == 3
    assert run(["retrain", "--out", str(tmp_path / "nothing")]) == 3
    assert "missing" in capsys.readouterr().err


def test_missing_cifar_dir_exit_code(tmp_path):
    assert run(["search", "--out", str(tmp_path), "--set", "dataset=cifar10", "--data-dir", str(tmp_path / "none")]) == 3


def test_search_plot_retrain(tmp_path, capsys):
    out = tmp_path / "run"
    assert run(["search", *FAST, "--seed", "1", "--out", str(out)]) == 0
    for name in ("trajectory.csv", "final_architecture.json", "metrics.csv", "run_config.resolved", "supernet.json"):
        assert (out / name).is_file()
    traj = Trajectory.from_csv((out / "trajectory.csv").read_text())
    assert len(traj.rows) == 2 * 3 * 6
    assert "seed=1" in (out / "run_config.resolved").read_text().splitlines()

    assert run(["plot", "--out", str(out)]) == 0
    svgs = sorted((out / "plots").glob("*.svg"))
    assert [p.name for p in svgs] == ["block_0.svg", "block_1.svg", "block_2.svg"]
    assert all(p.read_text().count("<polyline") == 6 for p in svgs)

    assert run(["retrain", *FAST, "--out", str(out), "--set", "retrain_epochs=1"]) == 0
    lines = (out / "retrain_metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,eval_accuracy" and len(lines) == 2


# plotting -------------------------------------------------------------------------


def _rows(epochs, block=0):
    rows = []
    for e in range(epochs):
        p = np.full(6, 1 / 6) if e == 0 else np.array([0.5, 0.1, 0.1, 0.1, 0.1, 0.1])
        rows += [(e, block, c, float(p[c])) for c in range(6)]
    return rows


def test_plot_single_block_trajectory(tmp_path):
    traj = Trajectory(_rows(3))
    path = tmp_path / "trajectory.csv"
    path.write_text(traj.to_csv())
    assert run(["plot", "--out", str(tmp_path), "--trajectory", str(path)]) == 0
    svgs = list((tmp_path / "plots").glob("*.svg"))
    assert len(svgs) == 1
    text = svgs[0].read_text()
    assert text.count("<polyline") == 6
    labels = re.findall(r"<title>([^<]+)</title>", text)
    assert {"k3-relu", "k5-mish"} <= set(labels)


def test_plot_is_deterministic():
    assert emit_plot_svg(_rows(4), "t") == emit_plot_svg(_rows(4), "t")


def test_plot_single_epoch_draws_points():
    assert emit_plot_svg(_rows(1), "t").count("<circle") >= 6


def test_plot_errors():
    with pytest.raises(ValueError):
        emit_plot_svg([], "t")
    with pytest.raises(ValueError):
        emit_plot_svg(_rows(2) + _rows(2, block=1), "t")
    gap = [r for r in _rows(3) if r[0] != 1]
    with pytest.raises(ValueError):
        emit_plot_svg(gap, "t")

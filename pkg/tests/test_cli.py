"""Command-line surface: subcommands, exit codes, and error reporting."""

from __future__ import annotations

from pathlib import Path

import pytest

from evotutor.cli import main

GRAPH = Path(__file__).resolve().parent.parent / "configs" / "graph_6c2d.toml"

CONFIG_TEMPLATE = """
[run]
seed = 5
graph = "{graph}"
output_dir = "{out}"
horizon = 8
eval_episodes = 2
inner_steps = 16
n_probes = 4

[policy]
hidden = [16, 16]
rank_ea = 3
rank_rl = 2

[filter]
particles = 16

[ppo]
lr = 3e-3
value_lr = 1e-2
epochs = 2
minibatch = 16
k_update = 16

[ea]
population = 2
generations = 1
"""


def write_config(tmp_path, graph=GRAPH, **kwargs) -> Path:
    out = kwargs.pop("out", tmp_path / "run")
    text = CONFIG_TEMPLATE.format(graph=graph, out=out)
    path = tmp_path / "config.toml"
    path.write_text(text)
    return path


def test_no_args_prints_usage(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_nonzero():
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_validate_ok(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["validate", str(cfg)]) == 0
    assert "config ok" in capsys.readouterr().out


def test_validate_missing_graph_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere.toml"
    cfg = write_config(tmp_path, graph=missing)
    assert main(["validate", str(cfg)]) == 1
    assert "nowhere.toml" in capsys.readouterr().err


def test_train_and_eval_roundtrip(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["train", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "best fitness" in out
    run_dir = tmp_path / "run"
    assert (run_dir / "metrics.csv").exists()

    assert main(["eval", str(run_dir / "best_adapters.bin"), str(cfg),
                 "--episodes", "2"]) == 0
    out = capsys.readouterr().out
    assert "mean return" in out


def test_train_bad_config_nonzero(tmp_path, capsys):
    path = tmp_path / "broken.toml"
    path.write_text("[run]\nseed = \n")
    assert main(["train", str(path)]) == 1
    assert "error" in capsys.readouterr().err


def test_ablate_suffixes_output_dir(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["ablate", str(cfg), "disable_prm"]) == 0
    assert (tmp_path / "run-disable_prm" / "metrics.csv").exists()


def test_export_projection_subcommand(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["train", str(cfg)]) == 0
    capsys.readouterr()
    assert main(["export-projection", str(tmp_path / "run")]) == 0
    assert "projection.csv" in capsys.readouterr().out


def test_export_projection_missing_dir(tmp_path, capsys):
    assert main(["export-projection", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err

from __future__ import annotations

import json

import pytest

from pmfl.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main

CONFIG = """
schemes: [direct, pmfl]
k_pretrain: 2
rounds: 1
repeats: 1
finetune_epochs: 2
batches_per_epoch: 3
hidden_layers: [3]
family: {dim: 3, heterogeneity: 0.5, samples_per_task: 60, seed: 0}
"""


@pytest.fixture
def config(tmp_path, monkeypatch):
    monkeypatch.delenv("PMFL_SEED", raising=False)
    p = tmp_path / "cfg.yaml"
    p.write_text(CONFIG, encoding="utf-8")
    return p


def test_run_writes_outputs(config, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(config), "--out", str(out), "--round-log", str(tmp_path / "r.jsonl")]) == EXIT_OK
    assert {p.name for p in out.iterdir()} == {"summary.csv", "curves.csv", "config.json"}
    assert "pmfl" in capsys.readouterr().out
    assert (tmp_path / "r.jsonl").read_text().count("\n") == 1


def test_seed_env_override(config, tmp_path, monkeypatch):
    monkeypatch.setenv("PMFL_SEED", "42")
    out = tmp_path / "out"
    assert main(["run", "--config", str(config), "--out", str(out)]) == EXIT_OK
    assert json.loads((out / "config.json").read_text())["seeds"] == [42]


def test_ablate_clients(config, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate-clients", "--counts", "1,2", "--config", str(config), "--out", str(out)]) == EXIT_OK
    assert len((out / "summary.csv").read_text().splitlines()) == 1 + 3


def test_gen_data(tmp_path):
    spec = tmp_path / "fam.json"
    spec.write_text(json.dumps({"dim": 3, "heterogeneity": 1.0, "samples_per_task": 20, "seed": 1, "tasks": 4}))
    out = tmp_path / "data"
    assert main(["gen-data", "--spec", str(spec), "--out", str(out)]) == EXIT_OK
    assert sorted(p.name for p in out.glob("*.csv")) == [f"task{i}.csv" for i in range(4)]
    assert json.loads((out / "family.json").read_text())["tasks"] == 4


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("schemes: []\nfamily: {dim: 3}\n", encoding="utf-8")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()
    garbled = tmp_path / "g.yaml"
    garbled.write_text("a: [1,\n", encoding="utf-8")
    assert main(["run", "--config", str(garbled)]) == EXIT_CONFIG


def test_io_error_exit_code(tmp_path, config):
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == EXIT_IO
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["run", "--config", str(config), "--out", str(blocker / "sub")]) == EXIT_IO


def test_bad_counts_is_usage_error(config):
    with pytest.raises(SystemExit):
        main(["ablate-clients", "--counts", "a,b", "--config", str(config)])

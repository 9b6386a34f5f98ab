from __future__ import annotations

import pytest
import yaml

from fedjoule.cli import main
from fedjoule.config import (
    ExperimentConfig,
    PartitionConfig,
    StrategyConfig,
    WorkloadConfig,
    config_to_dict,
)
from fedjoule.data_partition import load_dataset
from fedjoule.device_model import load_profiles
from fedjoule.orchestrator import read_metrics


def tiny_config_dict(strategy: str = "rnd") -> dict:
    cfg = ExperimentConfig(
        master_seed=5,
        budget_j=3000.0,
        target_accuracy=0.5,
        cluster={"edge_xl": 1, "edge_l": 1, "edge_m": 1, "edge_s": 1},
        workload=WorkloadConfig(classes=4, dim=8, train_samples=200, val_samples=80),
        partition=PartitionConfig(kind="dirichlet", dirichlet_alpha=0.5),
        strategy=StrategyConfig(name=strategy, gamma=2),
    )
    return config_to_dict(cfg)


def write_config(path, strategy: str = "rnd") -> None:
    path.write_text(yaml.safe_dump(tiny_config_dict(strategy)))


def test_run_writes_metrics_plot_and_config(tmp_path, capsys) -> None:
    cfg_path = tmp_path / "exp.yaml"
    write_config(cfg_path)
    out_dir = tmp_path / "out"
    rc = main(["run", "--config", str(cfg_path), "--out", str(out_dir)])
    assert rc == 0
    rows, summary = read_metrics(str(out_dir / "metrics.csv"))
    assert rows
    assert summary["budget_violation"] == "false"
    assert (out_dir / "metrics.svg").exists()
    assert (out_dir / "metrics_config.yaml").exists()
    stdout = capsys.readouterr().out
    assert "rounds" in stdout and "metrics.csv" in stdout


def test_sweep_runs_each_config(tmp_path, capsys) -> None:
    cfg_dir = tmp_path / "configs"
    cfg_dir.mkdir()
    write_config(cfg_dir / "rnd.yaml", "rnd")
    write_config(cfg_dir / "escs.yaml", "escs")
    out_dir = tmp_path / "out"
    rc = main(["sweep", "--configs", str(cfg_dir), "--out", str(out_dir)])
    assert rc == 0
    for stem in ("rnd", "escs"):
        rows, _ = read_metrics(str(out_dir / f"{stem}.csv"))
        assert rows
    assert (out_dir / "sweep.svg").exists()
    stdout = capsys.readouterr().out
    assert "rnd:" in stdout and "escs:" in stdout


def test_sweep_empty_directory_fails(tmp_path, capsys) -> None:
    cfg_dir = tmp_path / "configs"
    cfg_dir.mkdir()
    rc = main(["sweep", "--configs", str(cfg_dir), "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "no .yaml config files" in capsys.readouterr().err


def test_plot_subcommand(tmp_path) -> None:
    cfg_path = tmp_path / "exp.yaml"
    write_config(cfg_path)
    out_dir = tmp_path / "out"
    main(["run", "--config", str(cfg_path), "--out", str(out_dir)])
    svg = tmp_path / "chart.svg"
    rc = main(
        ["plot", "--metrics", str(out_dir / "metrics.csv"), "--out", str(svg)]
    )
    assert rc == 0
    assert "<svg" in svg.read_text()


def test_bench_subcommand(capsys) -> None:
    rc = main(
        ["bench", "--pools", "4", "6", "--cohorts", "3", "--reps", "2", "--seed", "1"]
    )
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "pool" in stdout and "ok" in stdout


def test_gen_profiles(tmp_path, capsys) -> None:
    out = tmp_path / "profiles.csv"
    rc = main(
        [
            "gen-profiles",
            "--out",
            str(out),
            "--classes",
            "edge_xl",
            "edge_s",
            "--workload",
            "wl",
            "--seed",
            "3",
        ]
    )
    assert rc == 0
    profiles = load_profiles(str(out))
    assert set(profiles) == {("edge_xl", "wl"), ("edge_s", "wl")}
    assert "profiles" in capsys.readouterr().out


def test_gen_profiles_unknown_class(tmp_path, capsys) -> None:
    rc = main(
        ["gen-profiles", "--out", str(tmp_path / "p.csv"), "--classes", "edge_zz"]
    )
    assert rc == 2
    assert "unknown device classes: edge_zz" in capsys.readouterr().err


def test_gen_data_with_partition(tmp_path) -> None:
    data_path = tmp_path / "data.csv"
    part_path = tmp_path / "partition.csv"
    rc = main(
        [
            "gen-data",
            "--out",
            str(data_path),
            "--classes",
            "4",
            "--dim",
            "6",
            "--samples",
            "120",
            "--seed",
            "2",
            "--partition-out",
            str(part_path),
            "--partition",
            "dirichlet",
            "--clients",
            "4",
            "--dirichlet-alpha",
            "0.5",
        ]
    )
    assert rc == 0
    data = load_dataset(str(data_path))
    assert len(data) == 120
    assert data.dim == 6
    lines = part_path.read_text().splitlines()
    assert lines[0] == "sample_index,client_index"
    assert len(lines) == 121


def test_unknown_subcommand_rejected() -> None:
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_run_determinism_via_cli(tmp_path) -> None:
    cfg_path = tmp_path / "exp.yaml"
    write_config(cfg_path, "fedj_k")
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    main(["run", "--config", str(cfg_path), "--out", str(out_a)])
    main(["run", "--config", str(cfg_path), "--out", str(out_b)])
    rows_a, _ = read_metrics(str(out_a / "metrics.csv"))
    rows_b, _ = read_metrics(str(out_b / "metrics.csv"))
    assert len(rows_a) == len(rows_b)
    for a, b in zip(rows_a, rows_b):
        for key in ("round", "cohort", "round_time_s", "round_energy_j", "cum_energy_j", "global_acc"):
            assert a[key] == b[key]


def test_env_override_reaches_run(tmp_path, monkeypatch) -> None:
    cfg_path = tmp_path / "exp.yaml"
    write_config(cfg_path)
    monkeypatch.setenv("FEDJOULE_EXPERIMENT__BUDGET_J", "0.001")
    out_dir = tmp_path / "out"
    rc = main(["run", "--config", str(cfg_path), "--out", str(out_dir)])
    assert rc == 0
    rows, summary = read_metrics(str(out_dir / "metrics.csv"))
    assert rows == []
    assert summary["summary"] == "no rounds"


def test_help_mentions_subcommands(capsys) -> None:
    with pytest.raises(SystemExit):
        main(["--help"])
    stdout = capsys.readouterr().out
    for name in ("run", "sweep", "plot", "bench", "gen-profiles", "gen-data"):
        assert name in stdout

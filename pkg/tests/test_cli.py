import csv
import json

import pytest

from diagdenoise.cli import main
from diagdenoise.config import ConfigError, default_config, load_config
from diagdenoise.container import read_container


def test_bench_reports_published_nfe(capsys):
    assert main(["bench", "--schedules",
                 "4322222,5433333,5432222,5333333,4333333,4222222"]) == 0
    out = capsys.readouterr().out
    for token in ("34", "48", "40", "46", "44", "32"):
        assert token in out


def test_bench_csv_stdout(capsys):
    assert main(["bench", "--schedules", "4322222", "--csv"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("schedule,nfe")
    assert lines[1].startswith("4322222,34")


def test_bench_csv_file_and_figure(tmp_path, capsys):
    csv_path = tmp_path / "bench.csv"
    assert main(["bench", "--schedules", "4322222,4222222", "--csv",
                 str(csv_path)]) == 0
    rows = list(csv.DictReader(open(csv_path)))
    assert rows[1]["schedule"] == "4322222" and rows[1]["nfe"] == "34"
    assert (tmp_path / "bench.png").exists()


def test_bench_rows_sorted_by_schedule(capsys):
    main(["bench", "--schedules", "5433333,4222222,4322222", "--csv"])
    lines = capsys.readouterr().out.strip().splitlines()[1:]
    schedules = [ln.split(",")[0] for ln in lines]
    assert schedules == sorted(schedules)


def test_generate_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a.dlat", tmp_path / "b.dlat"
    args = ["generate", "--schedule", "4322222", "--chunks", "7", "--seed", "42",
            "--out"]
    assert main(args + [str(a)]) == 0
    assert main(args + [str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_generate_seed_changes_bytes(tmp_path):
    a, b = tmp_path / "a.dlat", tmp_path / "b.dlat"
    assert main(["generate", "--seed", "1", "--out", str(a)]) == 0
    assert main(["generate", "--seed", "2", "--out", str(b)]) == 0
    assert a.read_bytes() != b.read_bytes()


def test_generate_header_contents(tmp_path):
    path = tmp_path / "run.dlat"
    assert main(["generate", "--schedule", "432", "--seed", "5", "--forcing-t",
                 "200", "--window", "3", "--out", str(path)]) == 0
    header, tensors = read_container(path)
    assert header["seed"] == 5
    assert header["forcing_t"] == 200
    assert header["window_chunks"] == 3
    assert len(tensors) == 3
    assert header["timesteps"][0] == [1000, 700, 400, 100]
    assert header["timesteps"][1] == [1000, 550, 100]


def test_generate_cyclic_flag(tmp_path):
    path = tmp_path / "long.dlat"
    assert main(["generate", "--schedule", "4322222", "--chunks", "9", "--cyclic",
                 "--seed", "1", "--out", str(path)]) == 0
    header, tensors = read_container(path)
    assert len(tensors) == 9


def test_generate_without_cyclic_fails_usage(tmp_path, capsys):
    path = tmp_path / "x.dlat"
    code = main(["generate", "--schedule", "432", "--chunks", "5", "--out", str(path)])
    assert code == 1
    assert "error[usage]:" in capsys.readouterr().err


def test_config_file_merging(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"forcing_t": 321, "window_chunks": 2}))
    out = tmp_path / "cfg_run.dlat"
    assert main(["generate", "--schedule", "22", "--config", str(cfg_path),
                 "--out", str(out)]) == 0
    header, _ = read_container(out)
    assert header["forcing_t"] == 321
    assert header["window_chunks"] == 2


def test_config_unknown_key_is_usage_error(tmp_path, capsys):
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text(json.dumps({"frocing_t": 100}))
    code = main(["generate", "--config", str(cfg_path), "--out",
                 str(tmp_path / "x.dlat")])
    assert code == 1
    assert "unknown config key" in capsys.readouterr().err


def test_config_type_validation():
    with pytest.raises(ConfigError, match="must be int"):
        load_config(None, {"window_chunks": "four"})
    with pytest.raises(ConfigError, match="must be int"):
        load_config(None, {"window_chunks": True})
    cfg = load_config(None, {"cost_per_forward": 2})
    assert cfg["cost_per_forward"] == 2.0


def test_diag_seed_env_overrides_default(tmp_path, monkeypatch):
    monkeypatch.setenv("DIAG_SEED", "777")
    assert default_config()["seed"] == 777
    out = tmp_path / "env.dlat"
    assert main(["generate", "--schedule", "22", "--out", str(out)]) == 0
    header, _ = read_container(out)
    assert header["seed"] == 777


def test_diag_seed_invalid(monkeypatch):
    monkeypatch.setenv("DIAG_SEED", "not-a-number")
    with pytest.raises(ConfigError):
        default_config()


def test_train_gaussian_writes_csv_and_figure(tmp_path, capsys):
    log = tmp_path / "train.csv"
    assert main(["train", "--mode", "gaussian", "--steps", "30", "--seed", "1",
                 "--weights", "4,4,1", "--log", str(log)]) == 0
    rows = list(csv.DictReader(open(log)))
    assert len(rows) == 30
    assert list(rows[0].keys()) == ["step", "L_DMD", "L_reg", "L_DMD_flow",
                                    "L_reg_flow", "total", "|b-m|"]
    assert (tmp_path / "train.png").exists()


def test_train_toy_smoke(tmp_path):
    log = tmp_path / "toy.csv"
    assert main(["train", "--mode", "toy", "--strategy", "diagonal", "--steps", "3",
                 "--seed", "1", "--batch", "4", "--log", str(log),
                 "--no-figure"]) == 0
    rows = list(csv.DictReader(open(log)))
    assert len(rows) == 3
    assert "|b-m|" not in rows[0]


def test_train_bad_weights_usage_error(capsys):
    assert main(["train", "--weights", "4,4"]) == 1
    assert "error[usage]:" in capsys.readouterr().err


def test_gradcheck_small(capsys):
    assert main(["gradcheck", "--seeds", "2"]) == 0
    out = capsys.readouterr().out
    assert "overall max relative error" in out


def test_gradcheck_impossible_tolerance_numeric_exit(capsys):
    assert main(["gradcheck", "--seeds", "1", "--tolerance", "1e-30"]) == 2
    assert "error[numeric]:" in capsys.readouterr().err


def test_data_subcommand_round_trip(tmp_path):
    out = tmp_path / "clips.dlat"
    assert main(["data", "--clips", "5", "--velocity", "1,0", "--frames", "4",
                 "--seed", "3", "--out", str(out)]) == 0
    header, clips = read_container(out)
    assert header["clips"] == 5 and header["velocity"] == [1.0, 0.0]
    assert len(clips) == 5
    assert clips[0].shape == (4, 1, 8, 8)


def test_data_deterministic(tmp_path):
    a, b = tmp_path / "a.dlat", tmp_path / "b.dlat"
    main(["data", "--clips", "3", "--seed", "9", "--out", str(a)])
    main(["data", "--clips", "3", "--seed", "9", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_unknown_subcommand_usage(capsys):
    assert main(["frobnicate"]) == 1


def test_bad_schedule_usage(capsys):
    assert main(["bench", "--schedules", "40x"]) == 1
    assert "error[usage]:" in capsys.readouterr().err


def test_train_config_file_routes_motion_keys(tmp_path):
    cfg_path = tmp_path / "train_cfg.json"
    cfg_path.write_text(json.dumps({"ema_mu": 0.5, "c_feat": 2, "c_mid": 4}))
    log = tmp_path / "cfg_toy.csv"
    assert main(["train", "--mode", "toy", "--steps", "2", "--seed", "1",
                 "--batch", "4", "--config", str(cfg_path), "--log", str(log),
                 "--no-figure"]) == 0
    assert len(list(csv.DictReader(open(log)))) == 2


def test_train_config_rejects_nonlearned_flow_repr_for_training(tmp_path, capsys):
    cfg_path = tmp_path / "bad_train.json"
    cfg_path.write_text(json.dumps({"flow_repr": "diff"}))
    assert main(["train", "--mode", "toy", "--steps", "1", "--batch", "2",
                 "--config", str(cfg_path)]) == 1
    assert "flow_repr" in capsys.readouterr().err

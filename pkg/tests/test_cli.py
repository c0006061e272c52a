"""Command-line interface: artifacts, determinism, exit codes, config files."""

import json

import numpy as np
import pytest

from drivestack import cli
from drivestack import scenario as scn_mod


def run(*argv):
    return cli.main([str(a) for a in argv])


def gen(tmp_path, name="data", count=6, family="interactive", seed=0,
        future_seconds=13.0):
    out = tmp_path / name
    code = run("gen-data", "--family", family, "--count", count,
               "--seed", seed, "--future-seconds", future_seconds,
               "--out", out)
    assert code == 0
    return out


def read_csv_header(path):
    return path.read_text().splitlines()[0].split(",")


def test_gen_data_writes_loadable_scenarios(tmp_path):
    out = gen(tmp_path)
    data = out / "scenarios.jsonl"
    assert data.exists()
    assert (out / "resolved_config.json").exists()
    scns = scn_mod.load(data)
    assert len(scns) == 6
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["count"] == 6
    assert resolved["family"] == "interactive"


def test_gen_data_is_byte_deterministic(tmp_path):
    a = gen(tmp_path, "a")
    b = gen(tmp_path, "b")
    assert (a / "scenarios.jsonl").read_bytes() == (b / "scenarios.jsonl").read_bytes()


def test_train_writes_checkpoint_and_log(tmp_path):
    data = gen(tmp_path)
    out = tmp_path / "run"
    code = run("train", "--data", data / "scenarios.jsonl", "--mode", "standard",
               "--setting", "rl", "--epochs", 1, "--out", out)
    assert code == 0
    assert (out / "checkpoint.json").exists()
    log = out / "training_log.csv"
    assert read_csv_header(log) == list(cli.TRAINING_LOG_COLUMNS)
    rows = log.read_text().splitlines()
    assert len(rows) == 2  # header + one epoch
    from drivestack.training import Checkpoint
    ckpt = Checkpoint.from_json((out / "checkpoint.json").read_text())
    assert ckpt.train_mode == "standard"


def test_train_reruns_are_byte_identical(tmp_path):
    data = gen(tmp_path)
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert run("train", "--data", data / "scenarios.jsonl",
                   "--epochs", 1, "--out", out) == 0
        outs.append(out)
    assert (outs[0] / "training_log.csv").read_bytes() == \
        (outs[1] / "training_log.csv").read_bytes()
    assert (outs[0] / "checkpoint.json").read_bytes() == \
        (outs[1] / "checkpoint.json").read_bytes()


def test_eval_open_loop_writes_contract_csvs(tmp_path):
    data = gen(tmp_path)
    out = tmp_path / "eval"
    code = run("eval-open-loop", "--data", data / "scenarios.jsonl",
               "--setting", "rl", "--out", out)
    assert code == 0
    per = out / "open_loop_scenarios.csv"
    summary = out / "open_loop_summary.csv"
    assert read_csv_header(per) == list(cli.OPEN_LOOP_SCENARIO_COLUMNS)
    assert read_csv_header(summary) == list(cli.OPEN_LOOP_SUMMARY_COLUMNS)
    body = summary.read_text().splitlines()[1:]
    runs = [line.split(",")[0] for line in body]
    assert cli.BASELINE_RUN in runs
    assert cli.ORACLE_RUN in runs


def test_eval_closed_loop_writes_contract_csvs(tmp_path):
    data = gen(tmp_path)
    out = tmp_path / "closed"
    code = run("eval-closed-loop", "--data", data / "scenarios.jsonl",
               "--tsim", 2.0, "--out", out)
    assert code == 0
    per = out / "closed_loop_scenarios.csv"
    summary = out / "closed_loop_summary.csv"
    assert read_csv_header(per) == list(cli.CLOSED_LOOP_SCENARIO_COLUMNS)
    assert read_csv_header(summary) == list(cli.CLOSED_LOOP_SUMMARY_COLUMNS)
    rows = [line.split(",") for line in per.read_text().splitlines()[1:]]
    runs = {row[1] for row in rows}
    assert cli.REPLAY_RUN in runs
    dev_col = list(cli.CLOSED_LOOP_SCENARIO_COLUMNS).index("deviation")
    for row in rows:
        if row[1] == cli.REPLAY_RUN:
            assert float(row[dev_col]) == 0.0


def test_grad_check_command_reports_json(tmp_path, capsys):
    out = tmp_path / "gc"
    code = run("grad-check", "--target", "dynamics", "--instances", 3,
               "--out", out)
    assert code == 0
    printed = capsys.readouterr().out
    report = json.loads(printed)
    assert report["dynamics"]["passed"] is True
    saved = json.loads((out / "grad_check.json").read_text())
    assert saved == report


def test_plot_renders_svg(tmp_path):
    data = gen(tmp_path)
    out = tmp_path / "eval"
    assert run("eval-open-loop", "--data", data / "scenarios.jsonl",
               "--out", out) == 0
    plots = tmp_path / "plots"
    code = run("plot", "--metrics-csv", out / "open_loop_summary.csv",
               "--out", plots)
    assert code == 0
    svgs = list(plots.glob("*.svg"))
    assert svgs
    again = tmp_path / "plots2"
    assert run("plot", "--metrics-csv", out / "open_loop_summary.csv",
               "--out", again) == 0
    assert svgs[0].read_bytes() == (again / svgs[0].name).read_bytes()


def test_missing_data_file_is_a_data_error(tmp_path):
    assert run("train", "--data", tmp_path / "nope.jsonl",
               "--out", tmp_path / "x") == 3


def test_bad_flag_value_exits_via_argparse(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("gen-data", "--family", "not-a-family", "--out", tmp_path)
    assert exc.value.code == 2


def test_unknown_config_key_is_a_config_error(tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("epocs=3\n")
    data = gen(tmp_path)
    assert run("train", "--data", data / "scenarios.jsonl", "--config", cfg,
               "--out", tmp_path / "run") == 2


def test_config_file_fills_defaults_but_flags_win(tmp_path):
    data = gen(tmp_path)
    cfg = tmp_path / "train.cfg"
    cfg.write_text("# comment line\nepochs=1\nseed=7\n")
    out = tmp_path / "cfgrun"
    assert run("train", "--data", data / "scenarios.jsonl", "--config", cfg,
               "--seed", 9, "--out", out) == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["epochs"] == 1  # from file
    assert resolved["seed"] == 9    # flag wins

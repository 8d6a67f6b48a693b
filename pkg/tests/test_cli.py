import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from basemoe import cli
from basemoe.core import STREAM_PARAMS, init_experts, seeded_rng

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def witness(tmp_path):
    p = tmp_path / "scores.csv"
    p.write_text("10,9\n10,0\n")
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_solve_witness(witness, capsys):
    assert run("solve", witness) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["objective"] == 19 and out["assignment"] == [1, 0]
    assert out["config"]["command"] == "solve"


def test_solve_oracle_agrees(witness, capsys):
    run("solve", witness)
    auction = json.loads(capsys.readouterr().out)
    run("solve", witness, "--oracle")
    oracle = json.loads(capsys.readouterr().out)
    assert oracle["assignment"] == auction["assignment"] and oracle["objective"] == 19


def test_solve_csv_output(witness, tmp_path):
    out = tmp_path / "a.csv"
    assert run("solve", witness, "--format", "csv", "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# config: ") and lines[1:] == ["token,expert", "0,1", "1,0"]


def test_malformed_csv_names_line(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("1,2\n3,4\n5\n6,7\n")
    assert run("solve", p) == cli.EXIT_PARSE
    assert "line 3" in capsys.readouterr().err


def test_contract_violation_exit_code(tmp_path, capsys):
    p = tmp_path / "odd.csv"
    p.write_text("1,2,3\n4,5,6\n")
    assert run("solve", p) == cli.EXIT_CONTRACT
    assert "contract violation" in capsys.readouterr().err


def test_missing_input_and_bad_flags():
    assert run("solve", "does-not-exist.csv") == cli.EXIT_PARSE
    assert run("simulate", "--no-such-flag") == cli.EXIT_PARSE
    assert run("simulate", "--tokens", "abc") == cli.EXIT_PARSE


def test_invalid_parameters_are_contract_errors():
    assert run("simulate", "--experts", "3", "--tokens", "4") == cli.EXIT_CONTRACT
    assert run("simulate", "--epsilon", "-1") == cli.EXIT_CONTRACT


def test_divergence_exit_code(tmp_path):
    code = run("train", "--experts", "2", "--clusters", "2", "--dim", "4", "--tokens", "4",
               "--steps", "30", "--lr", "1e150", "--out", tmp_path / "run")
    assert code == cli.EXIT_DIVERGED


def test_simulate_zero_experts_identity(tmp_path):
    out = tmp_path / "s.json"
    assert run("simulate", "--experts-zero", "--experts", "4", "--tokens", "8", "--out", out) == 0
    d = json.loads(out.read_text())
    assert d["max_abs_change"] == 0.0
    assert d["trace"]["dispatch_counts"] == [[2] * 4] * 4
    assert d["trace"]["origin_restored"]


def test_simulate_test_mode_max_shard(tmp_path):
    out = tmp_path / "s.json"
    assert run("simulate", "--mode", "test", "--experts", "4", "--tokens", "8", "--out", out) == 0
    assert json.loads(out.read_text())["trace"]["max_shard_size"] >= 8


def test_simulate_golden(tmp_path):
    out = tmp_path / "s.json"
    run("simulate", "--experts", "2", "--tokens", "4", "--dim", "3", "--seed", "5", "--out", out)
    assert out.read_bytes() == (GOLDEN / "simulate_E2_T4_D3_seed5.json").read_bytes()


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nexperts = 2\ntokens = 6\nexperts-zero = true\n")
    out = tmp_path / "s.json"
    assert run("simulate", "--config", cfg, "--tokens", "4", "--out", out) == 0
    c = json.loads(out.read_text())["config"]
    assert (c["experts"], c["tokens"], c["experts_zero"], c["dim"]) == (2, 4, True, 4)


def test_config_file_errors(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("nonsense = 1\n")
    assert run("simulate", "--config", cfg) == cli.EXIT_PARSE
    cfg.write_text("experts 2\n")
    assert run("simulate", "--config", cfg) == cli.EXIT_PARSE
    assert run("simulate", "--config", tmp_path / "missing.cfg") == cli.EXIT_PARSE


def test_train_zero_steps_checkpoint_equals_init(tmp_path):
    assert run("train", "--steps", "0", "--seed", "4", "--out", tmp_path / "r") == 0
    rec = json.loads((tmp_path / "r" / "checkpoint.json").read_text())
    from basemoe.trainer import read_checkpoint
    experts, readout, _, seed, cfg = read_checkpoint(rec)
    init = init_experts(seeded_rng(4, STREAM_PARAMS), 4, 8, 1)
    assert seed == 4 and cfg["steps"] == 0
    assert all(np.array_equal(experts.expert_flat(e), init.expert_flat(e)) for e in range(4))
    assert np.array_equal(readout, np.eye(8))


def test_analyze_balance_sums_to_one(tmp_path):
    run("train", "--steps", "5", "--out", tmp_path / "r")
    assert run("analyze", tmp_path / "r" / "checkpoint.json", "--out", tmp_path / "a") == 0
    d = json.loads((tmp_path / "a" / "analysis.json").read_text())
    assert abs(sum(d["balance_testing"]["usage"]) - 1) < 1e-9
    assert d["balance_training"]["usage"] == [0.25] * 4
    for name in ["balance_testing.csv", "balance_testing.dat", "balance_training.csv", "specialization.csv"]:
        assert (tmp_path / "a" / name).read_text().startswith("# config: ")


def test_analyze_rejects_non_checkpoint(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{not json")
    assert run("analyze", p) == cli.EXIT_PARSE
    p.write_text('{"format": "other"}')
    assert run("analyze", p) == cli.EXIT_PARSE


@pytest.mark.parametrize("argv", [
    ["simulate", "--seed", "9", "--experts", "4", "--tokens", "8"],
    ["simulate", "--seed", "9", "--mode", "test", "--format", "csv"],
    ["train", "--seed", "9", "--steps", "15"],
])
def test_repeated_commands_are_byte_identical(argv, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    is_dir = argv[0] == "train"
    assert run(*argv, "--out", a if is_dir else a.with_suffix(".out")) == 0
    assert run(*argv, "--out", b if is_dir else b.with_suffix(".out")) == 0
    if is_dir:
        for f in sorted(a.iterdir()):
            assert f.read_bytes() == (b / f.name).read_bytes(), f.name
    else:
        assert a.with_suffix(".out").read_bytes() == b.with_suffix(".out").read_bytes()


def test_full_pipeline_reproduces_purity_criterion(tmp_path):
    assert run("train", "--seed", "11", "--steps", "500", "--out", tmp_path / "r") == 0
    assert run("analyze", tmp_path / "r" / "checkpoint.json", "--out", tmp_path / "a") == 0
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    purity = json.loads((tmp_path / "a" / "analysis.json").read_text())["purity"]
    assert purity["final"] == summary["final_purity"] and purity["initial"] == summary["initial_purity"]
    assert purity["final"] > purity["initial"] and purity["final"] > purity["random_baseline_p99"]


def test_console_script_runs(witness):
    proc = subprocess.run([sys.executable, "-m", "basemoe.cli", "solve", str(witness)],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and json.loads(proc.stdout)["objective"] == 19

"""CLI tests: subcommands, overrides, and exit-code mapping."""
import json

import numpy as np
import pytest

from fedchain.checkpoint import load_checkpoint
from fedchain.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main


@pytest.fixture
def config_path(tmp_path):
    cfg = {
        "model": {"L": 3, "u": 8, "v": 3, "seed": 5},
        "data": {"kind": "cluster-tokens", "M": 80, "seq_len": 6, "vocab": 13,
                 "eval_fraction": 0.25},
        "federation": {"N": 3, "rounds": 2, "partition": "iid",
                       "sample_count": 2, "Q": 2},
        "chain": {"lambda": 0.2, "L_start": 1, "lr": 0.05, "local_steps": 1,
                  "batch": 16},
    }
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    return path


def _stderr_summary(capsys):
    captured = capsys.readouterr()
    return json.loads(captured.err.strip().split("\n")[-1]), captured.out


def test_run_streams_metrics_and_summary(config_path, capsys, tmp_path):
    out = tmp_path / "metrics.jsonl"
    code = main(["run", "--config", str(config_path), "--out", str(out)])
    assert code == EXIT_OK
    summary, stdout = _stderr_summary(capsys)
    assert summary["mode"] == "chainfed"
    assert summary["rounds"] == 2
    assert summary["Q"] == 2
    lines = [json.loads(l) for l in out.read_text().strip().split("\n")]
    assert len(lines) == 2
    assert lines[0]["round"] == 1 and lines[0]["window"] == [1, 2]
    assert stdout == ""  # records went to the file, not stdout


def test_run_prints_records_without_out_path(config_path, capsys):
    code = main(["run", "--config", str(config_path), "--rounds", "1"])
    assert code == EXIT_OK
    summary, stdout = _stderr_summary(capsys)
    assert summary["rounds"] == 1
    records = [json.loads(l) for l in stdout.strip().split("\n")]
    assert len(records) == 1 and records[0]["round"] == 1


def test_run_seed_override_changes_results(config_path, capsys):
    main(["run", "--config", str(config_path), "--rounds", "1"])
    first, _ = _stderr_summary(capsys)
    main(["run", "--config", str(config_path), "--rounds", "1", "--seed", "99"])
    second, _ = _stderr_summary(capsys)
    assert first["rounds"] == second["rounds"] == 1


def test_run_writes_checkpoint(config_path, capsys, tmp_path):
    base = tmp_path / "final"
    code = main(["run", "--config", str(config_path), "--rounds", "1",
                 "--checkpoint", str(base)])
    assert code == EXIT_OK
    stack = load_checkpoint(base)
    assert stack.L == 3
    capsys.readouterr()


def test_baseline_modes(config_path, capsys):
    code = main(["baseline", "--config", str(config_path), "--mode", "linear_probing",
                 "--rounds", "1"])
    assert code == EXIT_OK
    summary, _ = _stderr_summary(capsys)
    assert summary["mode"] == "linear_probing"
    with pytest.raises(SystemExit) as exc:  # chainfed is not a baseline
        main(["baseline", "--config", str(config_path), "--mode", "chainfed"])
    assert exc.value.code == 2


def test_profile_reports_scores_and_start_layer(config_path, capsys):
    code = main(["profile", "--config", str(config_path)])
    assert code == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert len(payload["scores"]) == 3
    assert payload["threshold"] is None  # config pins L_start instead
    assert payload["start_layer"] == 1
    assert payload["sample_weight"] > 0


def test_report_memory_preset(capsys):
    code = main(["report-memory", "--preset", "llama2-7b-shaped", "--q", "6", "7", "8"])
    assert code == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["dims"]["L"] == 32
    assert payload["assumptions"]["batch"] == 16
    assert set(payload["chain"]) == {"6", "7", "8"}
    reductions = [payload["reduction"][q] for q in ("6", "7", "8")]
    assert all(0.0 < r < 1.0 for r in reductions)
    assert reductions[0] > reductions[1] > reductions[2]  # wider window saves less
    full = payload["full"]
    assert full["peak_bytes"] == sum(full[k] for k in (
        "params_bytes", "activation_bytes", "adapter_and_grad_bytes", "optimizer_bytes"))
    assert "io_note" in payload


def test_report_memory_from_config(config_path, capsys, tmp_path):
    raw = json.loads(config_path.read_text())
    raw["model"]["vocab"] = 13
    cfg2 = tmp_path / "with_vocab.json"
    cfg2.write_text(json.dumps(raw))
    out = tmp_path / "mem.json"
    code = main(["report-memory", "--config", str(cfg2), "--q", "1", "2",
                 "--batch", "4", "--seq-len", "6", "--out", str(out)])
    assert code == EXIT_OK
    payload = json.loads(out.read_text())
    assert payload["dims"]["L"] == 3 and payload["assumptions"]["batch"] == 4


def test_report_memory_argument_errors(config_path, capsys):
    assert main(["report-memory"]) == EXIT_CONFIG
    assert main(["report-memory", "--preset", "llama2-7b-shaped",
                 "--config", str(config_path)]) == EXIT_CONFIG
    assert main(["report-memory", "--preset", "llama2-7b-shaped", "--q", "99"]) == EXIT_CONFIG
    capsys.readouterr()


def test_config_errors_exit_2(config_path, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
    raw = json.loads(config_path.read_text())
    raw["chain"]["T"] = 0.8  # both T and L_start
    both = tmp_path / "both.json"
    both.write_text(json.dumps(raw))
    assert main(["run", "--config", str(both)]) == EXIT_CONFIG
    assert main(["run", "--config", str(config_path), "--rounds", "-3"]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "fedchain:" in err


def test_missing_files_exit_4(config_path, tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nowhere.json")]) == EXIT_IO
    raw = json.loads(config_path.read_text())
    raw["data"] = {"source": "file", "path": str(tmp_path / "missing.jsonl"),
                   "vocab_path": str(tmp_path / "missing_vocab.json"), "seq_len": 6}
    cfg2 = tmp_path / "filedata.json"
    cfg2.write_text(json.dumps(raw))
    assert main(["run", "--config", str(cfg2)]) == EXIT_IO
    err = capsys.readouterr().err
    assert "i/o failure" in err


def test_numeric_blowup_exits_3(config_path, tmp_path, capsys):
    raw = json.loads(config_path.read_text())
    raw["chain"]["lr"] = 1e160  # divergent step overflows the next forward pass
    raw["chain"]["local_steps"] = 2
    cfg2 = tmp_path / "blowup.json"
    cfg2.write_text(json.dumps(raw))
    with np.errstate(all="ignore"):
        code = main(["run", "--config", str(cfg2)])
    assert code == EXIT_NUMERIC
    assert "numeric failure" in capsys.readouterr().err


def test_missing_required_args_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["run"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2

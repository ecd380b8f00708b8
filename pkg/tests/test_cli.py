"""End-to-end command-line workflows, exit codes, and output contracts.

Commands run in-process through main() so coverage tracks them; a dedicated
test keeps the module entry point honest.
"""

from __future__ import annotations

import json
import re
import subprocess
import sys

import pytest

from emocap.cli import main

pytestmark = pytest.mark.usefixtures("in_tmp_dir")


@pytest.fixture
def in_tmp_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def run(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """Shared corpus and a briefly trained checkpoint."""
    root = tmp_path_factory.mktemp("cli_ws")
    data = root / "corpus.jsonl"
    ckpt = root / "model.ckpt"
    hist = root / "history.jsonl"
    assert main(["gen-data", "--classes", "4", "--per-class", "6", "--seed", "7",
                 "-o", str(data)]) == 0
    assert main(["train", "-d", str(data), "--epochs", "4", "--seed", "7",
                 "--batch-size", "8", "--cmgpm-epoch", "2",
                 "--checkpoint", str(ckpt), "--history", str(hist)]) == 0
    return {"data": data, "ckpt": ckpt, "hist": hist}


# ---------------------------------------------------------------- gen-data


def test_gen_data_counts_and_summary(capsys, tmp_path):
    out_path = tmp_path / "d.jsonl"
    code, out, _ = run(["gen-data", "--classes", "8", "--per-class", "32",
                        "--seed", "1", "-o", str(out_path)], capsys)
    assert code == 0
    assert sum(1 for line in out_path.read_text().splitlines() if line) == 256
    assert "wrote 256 records" in out
    assert len(re.findall(r"class \d+ \(\w+\): 32", out)) == 8
    assert '"seed": 1' in out  # effective config echoed


def test_gen_data_missing_output_exits_2_with_usage(capsys):
    code, _, err = run(["gen-data", "--classes", "2", "--per-class", "2"], capsys)
    assert code == 2
    assert "usage" in err.lower()
    assert "output" in err


def test_gen_data_deterministic_bytes(capsys, tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    run(["gen-data", "--classes", "3", "--per-class", "4", "--seed", "5", "-o", str(a)], capsys)
    run(["gen-data", "--classes", "3", "--per-class", "4", "--seed", "5", "-o", str(b)], capsys)
    assert a.read_bytes() == b.read_bytes()


def test_gen_data_invalid_spec_exits_2(capsys, tmp_path):
    code, _, err = run(["gen-data", "--classes", "0", "--per-class", "2",
                        "-o", str(tmp_path / "x.jsonl")], capsys)
    assert code == 2
    assert "positive" in err


def test_gen_data_write_failure_exits_3(capsys, tmp_path):
    target = tmp_path / "missing_dir" / "d.jsonl"
    code, _, err = run(["gen-data", "--classes", "2", "--per-class", "2",
                        "-o", str(target)], capsys)
    assert code == 3
    assert "cannot write" in err


# ------------------------------------------------------------- config file


def test_config_file_supplies_values_and_flags_override(capsys, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"classes": 4, "per_class": 3, "seed": 9,
                               "output": str(tmp_path / "from_cfg.jsonl")}))
    code, out, _ = run(["gen-data", "--config", str(cfg), "--classes", "2"], capsys)
    assert code == 0
    assert "wrote 6 records" in out  # 2 classes (flag) x 3 per class (file)
    assert (tmp_path / "from_cfg.jsonl").exists()


def test_config_file_unknown_key_exits_2(capsys, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"bogus_key": 1}))
    code, _, err = run(["gen-data", "--config", str(cfg), "-o", "x.jsonl"], capsys)
    assert code == 2
    assert "bogus_key" in err


@pytest.mark.parametrize("content", ["not json at all", "[1, 2]"])
def test_config_file_malformed_exits_2(capsys, tmp_path, content):
    cfg = tmp_path / "run.json"
    cfg.write_text(content)
    code, _, _ = run(["gen-data", "--config", str(cfg), "-o", "x.jsonl"], capsys)
    assert code == 2


def test_config_file_unreadable_exits_3(capsys):
    code, _, _ = run(["gen-data", "--config", "no_such.json", "-o", "x.jsonl"], capsys)
    assert code == 3


def test_precision_env_applies_and_flag_wins(capsys, tmp_path, monkeypatch, workspace):
    monkeypatch.setenv("EMOCAP_PRECISION", "f32")
    code, out, _ = run(["train", "-d", str(workspace["data"]), "--epochs", "1",
                        "--batch-size", "8", "--seed", "0",
                        "--checkpoint", str(tmp_path / "e.ckpt"),
                        "--history", str(tmp_path / "e.jsonl")], capsys)
    assert code == 0
    assert '"precision": "f32"' in out
    code, out, _ = run(["train", "-d", str(workspace["data"]), "--epochs", "1",
                        "--batch-size", "8", "--seed", "0", "--precision", "f64",
                        "--checkpoint", str(tmp_path / "f.ckpt"),
                        "--history", str(tmp_path / "f.jsonl")], capsys)
    assert code == 0
    assert '"precision": "f64"' in out


def test_precision_env_invalid_exits_2(capsys, monkeypatch, workspace):
    monkeypatch.setenv("EMOCAP_PRECISION", "f16")
    code, _, err = run(["train", "-d", str(workspace["data"]), "--epochs", "1"], capsys)
    assert code == 2
    assert "EMOCAP_PRECISION" in err


# ------------------------------------------------------------------- train


def test_train_writes_outputs_and_prints_components(capsys, tmp_path, workspace):
    ckpt = tmp_path / "m.ckpt"
    hist = tmp_path / "h.jsonl"
    code, out, _ = run(["train", "-d", str(workspace["data"]), "--epochs", "2",
                        "--seed", "1", "--batch-size", "8",
                        "--checkpoint", str(ckpt), "--history", str(hist)], capsys)
    assert code == 0
    assert ckpt.exists() and hist.exists()
    assert re.search(r"total=[\d.]+ global=[\d.]+ intra=[\d.]+ inter=[\d.]+", out)
    assert '"alpha": 0.5' in out


def test_train_identical_runs_identical_checkpoints(capsys, tmp_path, workspace):
    paths = []
    for tag in ("x", "y"):
        ckpt = tmp_path / f"{tag}.ckpt"
        hist = tmp_path / f"{tag}.jsonl"
        code, _, _ = run(["train", "-d", str(workspace["data"]), "--epochs", "2",
                          "--seed", "1", "--batch-size", "8",
                          "--checkpoint", str(ckpt), "--history", str(hist)], capsys)
        assert code == 0
        paths.append((ckpt, hist))
    assert paths[0][0].read_bytes() == paths[1][0].read_bytes()
    assert paths[0][1].read_bytes() == paths[1][1].read_bytes()


def test_train_alpha_zero_total_equals_global(capsys, tmp_path, workspace):
    hist = tmp_path / "h0.jsonl"
    code, _, _ = run(["train", "-d", str(workspace["data"]), "--epochs", "2",
                      "--seed", "1", "--batch-size", "8", "--alpha", "0",
                      "--checkpoint", str(tmp_path / "a0.ckpt"),
                      "--history", str(hist)], capsys)
    assert code == 0
    for line in hist.read_text().splitlines():
        record = json.loads(line)
        assert record["total_loss"] == record["global_loss"]
        assert record["intra_loss"] > 0
        assert record["inter_loss"] > 0


def test_train_nonfinite_loss_exits_4_with_location(capsys, tmp_path, workspace):
    # huge but finite patch values overflow the projection into inf
    blasted = tmp_path / "blasted.jsonl"
    lines = []
    for line in workspace["data"].read_text().splitlines():
        record = json.loads(line)
        record["patches"] = [[1e308] * len(row) for row in record["patches"]]
        lines.append(json.dumps(record, sort_keys=True, separators=(",", ":")))
    blasted.write_text("\n".join(lines) + "\n")
    code, _, err = run(["train", "-d", str(blasted), "--epochs", "1",
                        "--batch-size", "8",
                        "--checkpoint", str(tmp_path / "b.ckpt"),
                        "--history", str(tmp_path / "b.jsonl")], capsys)
    assert code == 4
    assert "epoch 0" in err and "batch" in err


def test_train_invalid_config_exits_2(capsys, workspace):
    code, _, _ = run(["train", "-d", str(workspace["data"]), "--epochs", "1",
                      "--sigma", "1.5"], capsys)
    assert code == 2


def test_train_batch_larger_than_dataset_exits_2(capsys, workspace):
    code, _, err = run(["train", "-d", str(workspace["data"]), "--epochs", "1",
                        "--batch-size", "500"], capsys)
    assert code == 2
    assert "batch_size" in err


def test_train_missing_data_flag_exits_2(capsys):
    code, _, err = run(["train", "--epochs", "1"], capsys)
    assert code == 2
    assert "usage" in err.lower()


def test_train_corrupt_dataset_exits_3(capsys, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    code, _, err = run(["train", "-d", str(bad), "--epochs", "1"], capsys)
    assert code == 3
    assert "line 1" in err


# -------------------------------------------------------------------- eval


def test_eval_zero_shot_report(capsys, workspace):
    code, out, _ = run(["eval", "zero-shot", "-d", str(workspace["data"]),
                        "--checkpoint", str(workspace["ckpt"])], capsys)
    assert code == 0
    payload = json.loads(out)
    assert payload["task"] == "zero-shot"
    assert 0.0 <= payload["war"] <= 1.0
    assert len(payload["confusion"]) == 4
    assert payload["config"]["seed"] == 7  # checkpoint config echoed
    assert payload["evaluated"] == 24


def test_eval_reports_deterministic(capsys, workspace):
    _, first, _ = run(["eval", "zero-shot", "-d", str(workspace["data"]),
                       "--checkpoint", str(workspace["ckpt"])], capsys)
    _, second, _ = run(["eval", "zero-shot", "-d", str(workspace["data"]),
                        "--checkpoint", str(workspace["ckpt"])], capsys)
    assert first == second


def test_eval_retrieval_reports_pinned_ks(capsys, workspace):
    code, out, _ = run(["eval", "retrieval", "-d", str(workspace["data"]),
                        "--checkpoint", str(workspace["ckpt"])], capsys)
    assert code == 0
    payload = json.loads(out)
    for direction in ("image_to_text", "text_to_image"):
        assert set(payload["recall_at"][direction]) == {"1", "5", "10"}
        values = payload["recall_at"][direction]
        assert values["1"] <= values["5"] <= values["10"]


def test_eval_probe_reports_metrics(capsys, workspace):
    code, out, _ = run(["eval", "probe", "-d", str(workspace["data"]),
                        "--checkpoint", str(workspace["ckpt"]),
                        "--shots", "3", "--seed", "1"], capsys)
    assert code == 0
    payload = json.loads(out)
    assert payload["task"] == "probe"
    assert payload["shots"] == 3
    assert 0.0 <= payload["war"] <= 1.0


def test_eval_probe_insufficient_shots_exits_2(capsys, workspace):
    code, _, err = run(["eval", "probe", "-d", str(workspace["data"]),
                        "--checkpoint", str(workspace["ckpt"]),
                        "--shots", "50", "--seed", "1"], capsys)
    assert code == 2
    assert "50" in err


def test_eval_video_singleton_groups_match_image_mode(capsys, tmp_path, workspace):
    grouped = tmp_path / "grouped.jsonl"
    run(["gen-data", "--classes", "4", "--per-class", "6", "--seed", "7",
         "--frame-group-size", "1", "-o", str(grouped)], capsys)
    _, image_out, _ = run(["eval", "zero-shot", "-d", str(grouped),
                           "--checkpoint", str(workspace["ckpt"])], capsys)
    _, video_out, _ = run(["eval", "zero-shot", "-d", str(grouped),
                           "--checkpoint", str(workspace["ckpt"]), "--video"], capsys)
    image_payload = json.loads(image_out)
    video_payload = json.loads(video_out)
    assert image_payload["war"] == video_payload["war"]
    assert image_payload["confusion"] == video_payload["confusion"]
    assert video_payload["video"] is True


def test_eval_video_pools_multi_frame_groups(capsys, tmp_path, workspace):
    grouped = tmp_path / "g3.jsonl"
    run(["gen-data", "--classes", "4", "--per-class", "6", "--seed", "7",
         "--frame-group-size", "3", "-o", str(grouped)], capsys)
    code, out, _ = run(["eval", "zero-shot", "-d", str(grouped),
                        "--checkpoint", str(workspace["ckpt"]), "--video"], capsys)
    assert code == 0
    assert json.loads(out)["evaluated"] == 8  # 24 records in groups of 3


def test_eval_video_mixed_label_group_exits_3(capsys, tmp_path, workspace):
    mixed = tmp_path / "mixed.jsonl"
    lines = workspace["data"].read_text().splitlines()
    records = [json.loads(line) for line in lines]
    for record in records:
        record["frame_group"] = "all-one-group"
    mixed.write_text("\n".join(json.dumps(r, sort_keys=True) for r in records) + "\n")
    code, _, err = run(["eval", "zero-shot", "-d", str(mixed),
                        "--checkpoint", str(workspace["ckpt"]), "--video"], capsys)
    assert code == 3
    assert "mixes labels" in err


def test_eval_missing_checkpoint_exits_3(capsys, workspace):
    code, _, _ = run(["eval", "zero-shot", "-d", str(workspace["data"]),
                      "--checkpoint", "no_such.ckpt"], capsys)
    assert code == 3


def test_eval_garbage_checkpoint_exits_3(capsys, tmp_path, workspace):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTAMAGIC" + b"\x00" * 40)
    code, _, _ = run(["eval", "zero-shot", "-d", str(workspace["data"]),
                      "--checkpoint", str(bad)], capsys)
    assert code == 3


# --------------------------------------------------------------- gradcheck


def test_gradcheck_passes_and_reports_six_losses(capsys):
    code, out, _ = run(["gradcheck"], capsys)
    assert code == 0
    errors = dict(re.findall(r"(\S+)\s+max rel err (\S+)\s+ok", out))
    assert set(errors) == {"global", "intra", "inter", "mined-global", "mined-inter", "total"}
    assert all(float(v) < 1e-5 for v in errors.values())


def test_gradcheck_deterministic_per_seed(capsys):
    _, first, _ = run(["gradcheck", "--seed", "99"], capsys)
    _, second, _ = run(["gradcheck", "--seed", "99"], capsys)
    assert first == second


def test_gradcheck_sign_fault_exits_1(capsys):
    code, out, _ = run(["gradcheck", "--inject-sign-fault"], capsys)
    assert code == 1
    assert "FAIL" in out


# ------------------------------------------------------------- entry point


def test_module_entry_point_help():
    result = subprocess.run(
        [sys.executable, "-m", "emocap", "--help"], capture_output=True, text=True
    )
    assert result.returncode == 0
    for command in ("gen-data", "train", "eval", "gradcheck"):
        assert command in result.stdout

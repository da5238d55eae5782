import json
import subprocess
import sys

import pytest

from quweit.cli import SUBCOMMANDS, apply_override, run

TEXT = ("First Citizen:\nBefore we proceed any further, hear me speak.\n\nAll:\nSpeak, speak.\n\n") * 40
TINY = ["--set", "model.n_layers=1", "--set", "model.d_model=16", "--set", "model.n_heads=2",
        "--set", "model.context=16", "--set", "train.context=16", "--set", "train.batch_size=4",
        "--set", "train.steps=8", "--set", "train.warmup=2", "--set", "train.eval_interval=4",
        "--set", "train.eval_batches=2", "--quiet"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "input.txt"
    path.write_text(TEXT)
    return path


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run(["train", "--mode", "weightless", "--data", str(corpus), "--out", str(out), "--seed", "3"] + TINY) == 0
    return out


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero(cmd, capsys):
    assert run([cmd, "--help"]) == 0
    text = capsys.readouterr().out
    for flag in ("--config", "--set", "--out", "--seed", "--preset", "--mode"):
        assert flag in text


def test_usage_errors_exit_two(capsys):
    assert run([]) == 2
    assert run(["bogus"]) == 2
    assert run(["workload", "--set", "model.d_modl=3"]) == 2
    assert "d_modl" in capsys.readouterr().err
    assert run(["workload", "--set", "nokey"]) == 2
    assert run(["workload", "--config", "/nonexistent.json"]) == 2
    assert "/nonexistent.json" in capsys.readouterr().err
    assert run(["cost", "--profile", "fpga-3x3"]) == 2
    assert run(["verify-netlist", "--checkpoint", "/nonexistent.json"]) == 2


def test_override_parsing():
    cfg = {"model": {}, "train": {}}
    apply_override(cfg, "model.weightless.fan_in=4")
    apply_override(cfg, "train.lr=3e-4")
    apply_override(cfg, "model.kind=encoder")
    assert cfg["model"] == {"weightless": {"fan_in": 4}, "kind": "encoder"} and cfg["train"]["lr"] == 3e-4


def test_workload_gpt3(capsys):
    assert run(["workload", "--preset", "gpt3"]) == 0
    out = capsys.readouterr().out
    for cell in ("43,486,543,872", "4,831,838,208", "14,495,514,624", "57,982,058,496"):
        assert cell in out


def test_workload_json_to_out_dir(tmp_path, capsys):
    assert run(["workload", "--preset", "ivit-t", "--format", "json", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "workload.json").read_text())
    assert doc["mlp_mac_fraction"] == pytest.approx(294_912 / 517_632)


def test_cost_compare(capsys):
    assert run(["cost", "--preset", "ivit-t", "--profile", "fpga-32x32", "--compare"]) == 0
    out = capsys.readouterr().out
    assert "338.08 uJ" in out and "149.54 uJ" in out and "2.26x" in out


def test_cost_table_and_csv(tmp_path, capsys):
    assert run(["cost", "--table", "--format", "csv", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "mlp_vs_pe.csv").read_text().splitlines()
    assert [l.split(",")[1] for l in lines[1:]] == ["921600", "239616", "64512", "18432", "196"]


def test_config_file_sections(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"n_layers": 1, "d_model": 8, "n_heads": 2, "context": 4}}))
    assert run(["workload", "--config", str(cfg), "--format", "json", "--preset", "nano-shakespeare"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["total_macs_per_token"] == 3 * 64 + 32 + 32 + 64 + 256 + 256
    cfg.write_text(json.dumps({"modle": {}}))
    assert run(["workload", "--config", str(cfg)]) == 2


def test_train_artifacts(trained):
    assert (trained / "checkpoint.json").is_file()
    assert (trained / "metrics.csv").read_text().startswith("step,split,loss,lr,wallclock")
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["model"]["block_kind"] == "weightless" and cfg["model"]["seed"] == 3 and cfg["train"]["seed"] == 3


def test_train_is_reproducible(corpus, trained, tmp_path):
    argv = ["train", "--mode", "weightless", "--data", str(corpus), "--out", str(tmp_path), "--seed", "3"] + TINY
    assert run(argv) == 0
    assert (tmp_path / "checkpoint.json").read_bytes() == (trained / "checkpoint.json").read_bytes()

    def strip(p):
        return [l.rsplit(",", 1)[0] for l in p.read_text().splitlines()]

    assert strip(tmp_path / "metrics.csv") == strip(trained / "metrics.csv")


def test_eval_and_generate(corpus, trained, capsys, tmp_path):
    ck = str(trained / "checkpoint.json")
    assert run(["eval", "--checkpoint", ck, "--data", str(corpus)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc) == {"train", "val", "checkpoint_digest"}
    assert run(["generate", "--checkpoint", ck, "--data", str(corpus), "--prompt", "All:", "--steps", "12",
                "--seed", "1", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "sample.txt").read_text()
    assert text.startswith("All:") and len(text.rstrip("\n")) >= 4
    assert run(["generate", "--checkpoint", ck, "--data", str(corpus), "--prompt", "~"]) == 2


def test_export_and_verify(trained, tmp_path, capsys):
    ck = trained / "checkpoint.json"
    # float encodings: refused with guidance
    assert run(["export-netlist", "--checkpoint", str(ck), "--out", str(tmp_path / "a")]) == 1
    assert "quantize" in capsys.readouterr().err
    assert run(["export-netlist", "--checkpoint", str(ck), "--quantize", "--out", str(tmp_path / "hdl")]) == 0
    assert (tmp_path / "hdl" / "quweit_block_0.v").read_text().startswith("// quweit_block_0")
    qck = tmp_path / "hdl" / "checkpoint.quantized.json"
    capsys.readouterr()
    assert run(["verify-netlist", "--checkpoint", str(qck), "--vectors", "2000", "--out", str(tmp_path / "v")]) == 0
    rep = json.loads((tmp_path / "v" / "verify.json").read_text())
    assert rep[0]["mismatches"] == 0 and rep[0]["vectors_tested"] > 2000


def test_verify_corrupted_checkpoint_exits_one(trained, tmp_path, capsys):
    raw = bytearray((trained / "checkpoint.json").read_bytes())
    i = raw.index(b'"step":') + len(b'"step":')
    raw[i] = ord("7") if raw[i] != ord("7") else ord("6")
    bad = tmp_path / "bad.json"
    bad.write_bytes(bytes(raw))
    assert run(["verify-netlist", "--checkpoint", str(bad)]) == 1
    assert "digest mismatch" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "quweit", "workload", "--preset", "gpt3"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "57,982,058,496" in proc.stdout

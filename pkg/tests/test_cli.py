import json
import subprocess
import sys
from pathlib import Path

import pytest

from temporal_ssl.cli import main
from temporal_ssl.config import ConfigError, RunConfig

SMOKE = str(Path(__file__).resolve().parents[1] / "configs" / "smoke.ini")


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def fail(capsys, *argv):
    with pytest.raises(SystemExit) as exc:
        main(list(argv))
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return exc.value.code, json.loads(err[0])


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    base = ["--config", SMOKE, "--output-dir", str(out)]
    assert main(["gen-data", *base]) == 0
    assert main(["pretrain", *base]) == 0
    return out, base


def test_sample_debug_periodic(capsys):
    code, out, _ = run(capsys, "sample-debug", "--tau", "periodic", "--kappa", "0", "--s", "8", "--rho", "0")
    doc = json.loads(out)
    assert code == 0
    assert doc["indices"] == [0, 1, 2, 3, 4, 5, 6, 7, 8, 7, 6, 5, 4, 3, 2, 1]
    assert doc["valid"] and doc["tau_name"] == "periodic"


def test_sample_debug_other_taus(capsys):
    _, out, _ = run(capsys, "sample-debug", "--tau", "speed", "--kappa", "2", "--rho", "5", "--length", "70")
    assert json.loads(out)["indices"] == list(range(5, 66, 4))
    _, out, _ = run(capsys, "sample-debug", "--tau", "warp", "--seed", "3")
    assert json.loads(out)["valid"]
    _, out, _ = run(capsys, "sample-debug", "--tau", "random", "--length", "16",
                    "--permutation", ",".join(str(15 - i) for i in range(16)))
    assert json.loads(out)["indices"] == list(range(15, -1, -1))


def test_sample_debug_infeasible(capsys):
    code, err = fail(capsys, "sample-debug", "--tau", "speed", "--kappa", "3", "--length", "100")
    assert code == 5 and err["error"] == "InfeasibleVideoError"


def test_usage_and_config_errors_are_json(capsys, tmp_path):
    code, err = fail(capsys, "sample-debug")
    assert code == 2 and err["error"] == "UsageError"
    code, err = fail(capsys, "pretrain", "--set", "model.depth=3", "--output-dir", str(tmp_path))
    assert code == 2 and "model.depth" in err["message"]
    bad = tmp_path / "bad.ini"
    bad.write_text("[preprocess]\ncrop = 500\n")
    code, err = fail(capsys, "pretrain", "--config", str(bad), "--output-dir", str(tmp_path))
    assert code == 2


def test_missing_inputs(capsys, tmp_path):
    code, err = fail(capsys, "probe", "--output-dir", str(tmp_path))
    assert code == 3 and err["error"] == "FileNotFoundError"
    code, err = fail(capsys, "report", "--output-dir", str(tmp_path / "empty"))
    assert code == 3


def test_overrides_win_over_file(tmp_path):
    cfg = RunConfig.load(SMOKE, ["pretrain.epochs=7", "model.channels=2,2,2,2,2"])
    assert cfg["pretrain"]["epochs"] == 7 and cfg["model"]["channels"] == (2, 2, 2, 2, 2)
    assert cfg.network().input_size == 24
    again = tmp_path / "resolved.ini"
    cfg.write(again)
    assert RunConfig.load(again).values == cfg.values
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["eval.freeze=partial"])


def test_output_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("TEMPORAL_SSL_OUTPUT_ROOT", str(tmp_path))
    assert RunConfig.load().output_dir() == tmp_path


def test_zero_epoch_pretrain(capsys, smoke_run, tmp_path):
    out, _ = smoke_run
    code, stdout, _ = run(capsys, "pretrain", "--config", SMOKE, "--output-dir", str(tmp_path), "--epochs", "0",
                          "--set", f"data.corpus_dir={out / 'corpus'}")
    assert code == 0 and (tmp_path / "checkpoint.pt").exists()
    assert json.loads(stdout)["epochs"] == 0
    assert "epochs = 0" in (tmp_path / "config.pretrain.ini").read_text()


def test_pipeline_and_byte_identical_reruns(capsys, smoke_run, tmp_path):
    out, base = smoke_run
    first = (out / "metrics.jsonl").read_bytes()
    assert main(["pretrain", *base]) == 0
    assert (out / "metrics.jsonl").read_bytes() == first
    for cmd in (["probe"], ["sync"], ["sync", "--oracle"], ["before-after"], ["before-after", "--still"],
                ["still-probe"], ["retrieve"], ["retrieve", "--random-embeddings"], ["saliency"]):
        assert main([*cmd, *base]) == 0
    logs = {p.name: p.read_bytes() for p in out.glob("*.jsonl")}
    assert {"probe.jsonl", "sync.jsonl", "before_after.jsonl", "retrieval.jsonl", "saliency.jsonl"} <= set(logs)
    for cmd in (["probe"], ["sync"], ["retrieve"], ["saliency"]):
        assert main([*cmd, *base]) == 0
    for name in ("probe.jsonl", "sync.jsonl", "retrieval.jsonl", "saliency.jsonl"):
        assert (out / name).read_bytes() == logs[name], name
    capsys.readouterr()
    code, stdout, _ = run(capsys, "report", *base)
    assert code == 0
    assert stdout.splitlines()[0] == "source\tmetric\tvalue"
    for fig in ("loss_curves.png", "pretext_accuracy.png", "retrieval.png"):
        assert (out / "figures" / fig).stat().st_size > 1000
    assert len(list((out / "saliency").glob("*.png"))) == 2


def test_console_module_entry():
    res = subprocess.run([sys.executable, "-m", "temporal_ssl.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()

import json
import subprocess
import sys

import pytest

from diffaudit.cli import RunConfig, main, parse_config_text, write_config_text

TINY = ["--set", "timesteps=20", "--set", "epochs=40", "--set", "hidden=16", "--set", "embed_dim=8",
        "--set", "n_identities=6", "--set", "images_per_identity=3", "--set", "n_samples=6",
        "--set", "clusters=3", "--set", "n_masks=3", "--set", "n_queries=4", "--set", "n_runs=2",
        "--set", "iia_identities=2", "--set", "query_counts=1,2"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, ckpt = root / "data", root / "model" / "m.dfa"
    assert main(["generate", "--out", str(data), "--seed", "3", *TINY]) == 0
    assert main(["train", "--data", str(data), "--checkpoint", str(ckpt), "--seed", "1", *TINY]) == 0
    return root, data, ckpt


def common(ws):
    root, data, ckpt = ws
    return ["--data", str(data), "--checkpoint", str(ckpt), *TINY]


def test_generate_and_train_artifacts(workspace):
    root, data, ckpt = workspace
    assert (data / "labels.csv").is_file() and (data / "landmarks.json").is_file()
    meta = json.loads((data / "dataset.json").read_text())
    assert meta["meta"]["run_config"]["data_seed"] == 3
    side = json.loads(ckpt.with_suffix(".json").read_text())
    assert side["run_config"]["train_seed"] == 1
    lines = ckpt.with_suffix(".loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss" and len(lines) == 41


def test_attack_mia_report(workspace, capsys):
    root = workspace[0]
    out = root / "mia"
    assert main(["attack-mia", "--query", "id0000_000", "--out", str(out), *common(workspace)]) == 0
    rep = json.loads((out / "mia_report.json").read_text())
    c = rep["queries"][0]["confidence"]
    assert 0.0 < c <= 1.0
    assert rep["run_config"]["mia_threshold"] == 0.6
    assert rep["model_provenance"]["train_seed"] == 1
    assert "C=" in capsys.readouterr().out


def test_attack_iia_and_dea(workspace):
    root = workspace[0]
    assert main(["attack-iia", "--identity", "1", "--out", str(root / "iia"), *common(workspace)]) == 0
    rep = json.loads((root / "iia" / "iia_report.json").read_text())
    assert 0.0 < rep["score"] <= 1.0 and len(rep["queries"]) == 2
    assert main(["attack-dea", "--identity", "2", "--out", str(root / "dea"), *common(workspace)]) == 0
    man = json.loads((root / "dea" / "manifest.json").read_text())
    assert len(man["clusters"]) == 3 and "inertia" in man
    assert all((root / "dea" / c["file"]).is_file() for c in man["clusters"])
    assert all(0.0 < c["mia_confidence"] <= 1.0 for c in man["clusters"])


def test_evaluate_and_sweep(workspace):
    root = workspace[0]
    out = root / "eval"
    assert main(["evaluate", "--out", str(out), *common(workspace)]) == 0
    rep = json.loads((out / "evaluate_mia.json").read_text())
    assert len(rep["report"]["runs"]) == 2
    assert (out / "mia_metrics.csv").is_file()
    assert main(["sweep", "--out", str(root / "sw"), "--set", "sweep_values=5,10", *common(workspace)]) == 0
    assert len((root / "sw" / "sweep_mia.csv").read_text().splitlines()) == 3


def test_report_reproducible_across_workers_and_from_itself(workspace):
    out = workspace[0] / "repro"
    report = out / "evaluate_mia.json"
    assert main(["evaluate", "--out", str(out), "--workers", "1", *common(workspace)]) == 0
    first = report.read_bytes()
    assert main(["evaluate", "--out", str(out), "--workers", "4", *common(workspace)]) == 0
    assert report.read_bytes() == first
    assert main(["evaluate", "--config", str(report), "--workers", "4"]) == 0
    assert report.read_bytes() == first


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(workspace, tmp_path, capsys):
    root, data, ckpt = workspace
    missing = tmp_path / "nope.dfa"
    assert main(["attack-mia", "--query", "id0000_000", "--data", str(data), "--checkpoint", str(missing)]) == 2
    assert "nope.dfa" in capsys.readouterr().err
    assert main(["attack-mia", "--threshold", "1.5", *common(workspace), "--query", "x"]) == 1
    assert main(["evaluate", "--set", "bogus=1"]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs = many\n")
    assert main(["train", "--config", str(bad)]) == 1
    assert main(["train", "--data", str(tmp_path / "empty")]) == 2
    assert main(["train", "--data", str(data), "--checkpoint", str(tmp_path / "d.dfa"),
                 "--set", "lr=1e200", "--set", "lr_schedule=constant", *TINY]) == 3


def test_config_file_round_trip(tmp_path):
    cfg = RunConfig(epochs=17, lr=0.5, sampler="ancestral")
    text = write_config_text(cfg)
    back = RunConfig(**parse_config_text(text))
    assert back.resolved() == cfg.resolved()
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nepochs = 5\n\nt_start = 30  # trailing\n")
    assert main(["generate", "--config", str(p), "--out", str(tmp_path / "d"), "--set", "n_identities=2",
                 "--set", "images_per_identity=2"]) == 0


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "diffaudit.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "attack-mia" in r.stdout

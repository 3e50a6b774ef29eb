import hashlib
import json

import pytest

from odil.cli import main
from odil.config import ExperimentConfig
from odil.report import read_csv

TINY = {
    "stream": [
        {"domain_id": 1, "name": "base", "n_train": 60, "n_test": 40, "seed": 1, "severity": "mild", "n_locations": 2},
        {"domain_id": 2, "name": "shifted", "n_train": 30, "n_test": 30, "seed": 2, "severity": "moderate"},
        {"domain_id": 3, "name": "test-only", "n_train": 0, "n_test": 30, "seed": 3, "severity": "moderate",
         "adapt_from_test": True},
        {"domain_id": 4, "name": "severe", "classes": ["bus", "park", "metro", "metro_station"], "n_train": 24,
         "n_test": 16, "seed": 4, "severity": "severe", "adapt_per_class": 2},
    ],
    "model": {"widths": [4, 6]},
    "train": {"base_epochs": 3, "offline_epochs": 2, "batch_size": 16},
    "odil": {"schedule": "rising"},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def checksums(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in ("run.log", ".lock")}


def test_default_config_round_trips(tmp_path):
    cfg = ExperimentConfig()
    cfg.save(tmp_path / "c.json")
    again = ExperimentConfig.load(tmp_path / "c.json")
    assert again.to_dict() == cfg.to_dict() and again.digest() == cfg.digest()
    assert ExperimentConfig(seed=5, output_dir="x").digest() == cfg.digest()


def test_gen_data_default_stream(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "o")]) == 0
    rows = read_csv(tmp_path / "o" / "data" / "seed0" / "stream_summary.csv")
    assert [r["K"] for r in rows] == ["-", "10", "10", "10", "10", "8"]
    assert [r["train"] for r in rows][4] == "-"
    assert "config digest" in capsys.readouterr().out


def test_gen_data_refuses_to_overwrite(tmp_path, tiny_config):
    args = ["gen-data", "--config", str(tiny_config), "--out", str(tmp_path / "o")]
    assert main(args) == 0
    assert main(args) == 2
    assert main(args + ["--force"]) == 0


def test_gen_data_is_deterministic(tmp_path, tiny_config):
    for name in ("a", "b"):
        assert main(["gen-data", "--config", str(tiny_config), "--out", str(tmp_path / name)]) == 0
    assert checksums(tmp_path / "a") == checksums(tmp_path / "b")


def test_generated_manifests_reproduce_the_run(tmp_path, tiny_config):
    main(["gen-data", "--config", str(tiny_config), "--out", str(tmp_path / "g")])
    file_cfg = tmp_path / "g" / "data" / "seed0" / "config.json"
    assert main(["run", "--config", str(file_cfg), "--strategy", "odil", "--out", str(tmp_path / "m")]) == 0
    assert main(["run", "--config", str(tiny_config), "--strategy", "odil", "--out", str(tmp_path / "s")]) == 0
    a = json.loads((tmp_path / "m" / "reports" / "odil_seed0.json").read_text())
    b = json.loads((tmp_path / "s" / "reports" / "odil_seed0.json").read_text())
    assert a["matrix"] == b["matrix"]


def test_run_outputs(tmp_path, tiny_config):
    out = tmp_path / "o"
    assert main(["run", "--config", str(tiny_config), "--strategy", "odil,base", "--out", str(out)]) == 0
    odil = json.loads((out / "reports" / "odil_seed0.json").read_text())
    assert odil["forgetting"] == [0.0] * 4
    base = json.loads((out / "reports" / "base_seed0.json").read_text())
    m = base["matrix"]
    assert all(m[t][s] == m[s][s] for t in range(4) for s in range(t + 1))
    long = read_csv(out / "results_long.csv")
    assert list(long[0]) == ["strategy", "step", "domain", "acc", "avg_acc", "forgetting", "seed"]
    assert (out / "results_long.csv").read_text().startswith(f"# config_digest={odil['config_digest']}")
    series = read_csv(out / "series.csv")
    assert {r["forgetting"] for r in series if r["strategy"] == "odil"} == {"0.000000"}
    assert (out / "checkpoints" / "base_seed0.ckpt.json").exists()
    assert (out / "run.log").exists()
    # existing reports need --force; the stored base checkpoint is reused
    assert main(["run", "--config", str(tiny_config), "--strategy", "odil", "--out", str(out)]) == 2
    assert main(["run", "--config", str(tiny_config), "--strategy", "odil", "--out", str(out), "--force"]) == 0
    assert "loaded base checkpoint" in (out / "run.log").read_text()


def test_runs_are_byte_identical(tmp_path, tiny_config):
    for name in ("a", "b"):
        args = ["run", "--config", str(tiny_config), "--strategy", "ft-online,odil,joint", "--budget", "online",
                "--out", str(tmp_path / name)]
        assert main(args) == 0
    a, b = checksums(tmp_path / "a"), checksums(tmp_path / "b")
    assert a == b
    assert set(a) >= {"reports/ft-online_seed0.json", "reports/joint-online_seed0.json", "reports/odil_seed0.json"}


def test_seed_sweep_and_report(tmp_path, tiny_config, capsys):
    out = tmp_path / "o"
    assert main(["run", "--config", str(tiny_config), "--strategy", "odil", "--seeds", "2", "--out", str(out)]) == 0
    assert "±" in capsys.readouterr().out
    reports = sorted(str(p) for p in (out / "reports").glob("*.json"))
    assert len(reports) == 2
    assert main(["report", *reports, "--out", str(tmp_path / "rep")]) == 0
    rows = read_csv(tmp_path / "rep" / "comparison.csv")
    assert [r["n_seeds"] for r in rows] == ["2"] * 4
    assert {r["forgetting"] for r in rows} == {"0.000000"}


def test_report_rejects_mixed_digests(tmp_path, tiny_config):
    other = dict(TINY, odil={"schedule": "decaying"})
    other_path = tmp_path / "other.json"
    other_path.write_text(json.dumps(other))
    main(["run", "--config", str(tiny_config), "--strategy", "odil", "--out", str(tmp_path / "a")])
    main(["run", "--config", str(other_path), "--strategy", "odil", "--out", str(tmp_path / "b")])
    files = [str(tmp_path / d / "reports" / "odil_seed0.json") for d in ("a", "b")]
    assert main(["report", *files, "--out", str(tmp_path / "r")]) == 2
    assert main(["report", *files, "--out", str(tmp_path / "r"), "--allow-mixed"]) == 0


def test_no_train_without_checkpoint(tmp_path, tiny_config):
    assert main(["run", "--config", str(tiny_config), "--strategy", "base", "--no-train",
                 "--out", str(tmp_path / "o")]) == 3


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"stream": [], "colour": 1}))
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["run", "--strategy", "replay", "--out", str(tmp_path / "o")]) == 2
    assert main(["report", str(tmp_path / "nothing.json")]) == 3

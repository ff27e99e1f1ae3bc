from __future__ import annotations

import json
import shutil
import subprocess
import sys

import pytest
import yaml

from crystalgfn.cif import parse_cif
from crystalgfn.cli import main
from crystalgfn.config import DEFAULT_CONFIG_TEXT
from crystalgfn.oracles import SurrogateEnergy
from crystalgfn.reward import BondStatsTable, RewardConfig, composite_reward

TINY = {
    "seed": 3,
    "sampler": {"T": 2},
    "policy": {"width": 8, "head_hidden": 8, "n_rbf": 4},
    "train": {"batch_size": 4, "epochs": 50},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert main(["train", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root


def test_train_writes_run_layout(run):
    d = run / "run"
    assert (d / "config.yaml").exists() and (d / "checkpoints" / "final.ckpt").exists()
    lines = (d / "metrics.jsonl").read_text().splitlines()
    assert len(lines) >= 50
    first = json.loads(lines[0])
    for key in ("epoch", "mean_reward", "r_energy", "r_bond", "r_density", "r_comp", "modes", "states_visited"):
        assert key in first


def test_rerun_is_byte_identical(run):
    assert main(["train", "--config", str(run / "tiny.yaml"), "--out", str(run / "again")]) == 0
    assert (run / "again" / "metrics.jsonl").read_bytes() == (run / "run" / "metrics.jsonl").read_bytes()


def test_refuses_to_overwrite_log(run, capsys):
    assert main(["train", "--config", str(run / "tiny.yaml"), "--out", str(run / "run")]) == 2
    assert "already exists" in capsys.readouterr().err


def test_resume_extends_the_log(run):
    d = run / "resume"
    shutil.copytree(run / "run", d)
    cfg = yaml.safe_load((run / "tiny.yaml").read_text())
    cfg["train"]["epochs"] = 55
    (run / "longer.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["train", "--config", str(run / "longer.yaml"), "--out", str(d),
                 "--checkpoint", str(d / "checkpoints" / "final.ckpt")]) == 0
    lines = (d / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines[-6:]] == [50, 51, 52, 53, 54, 55]


def test_sample_is_sorted_and_recomputable(run):
    ckpt = run / "run" / "checkpoints" / "final.ckpt"
    assert main(["sample", "--checkpoint", str(ckpt), "--n", "10", "--seed", "1"]) == 0
    out = run / "run" / "samples"
    index = json.loads((out / "index.json").read_text())
    scores = [s["reward"]["composite"] for s in index["samples"]]
    assert len(scores) == 10 and scores == sorted(scores, reverse=True)
    stats = BondStatsTable.default()
    oracle = SurrogateEnergy(stats)
    for item in index["samples"]:
        s = parse_cif((out / item["cif"]).read_text())
        br = composite_reward(s, RewardConfig(), oracle, stats)
        assert br.composite == item["reward"]["composite"]
        mirror = json.loads((out / item["json"]).read_text())
        assert mirror["space_group"] == item["space_group"]


def test_evaluate_report(run, capsys):
    out = run / "run" / "samples"
    if not (out / "index.json").exists():
        main(["sample", "--checkpoint", str(run / "run" / "checkpoints" / "final.ckpt"), "--n", "10"])
    assert main(["evaluate", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert list(report) == ["structure_validity_rate", "composition_validity_rate", "diversity_structure",
                            "diversity_composition", "family_diversity", "modes", "match_rate", "mean_rms"]
    assert 0 <= report["structure_validity_rate"] <= 1


def test_evaluate_identical_structures(run, tmp_path):
    src = next((run / "run" / "samples").glob("*.cif"), None)
    if src is None:
        pytest.skip("sampling test did not run")
    for k in range(3):
        shutil.copy(src, tmp_path / f"s{k}.cif")
    assert main(["evaluate", str(tmp_path), "--no-relax"]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["diversity_structure"] == 0.0 and report["family_diversity"] == 0.0
    assert report["match_rate"] is None


def test_evaluate_empty_dir_fails(tmp_path, capsys):
    assert main(["evaluate", str(tmp_path)]) == 2
    assert "no .cif files" in capsys.readouterr().err


def test_bond_stats_validation_and_install(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("element_a,element_b,d_min,d_avg\nLi,O,1.63,3.02\nNa,Cl,3.0,2.0\n")
    assert main(["bond-stats", str(bad)]) == 1
    assert "row 2" in capsys.readouterr().err
    good = tmp_path / "good.csv"
    good.write_text("element_a,element_b,d_min,d_avg\nLi,O,1.63,3.02\n")
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(DEFAULT_CONFIG_TEXT)
    assert main(["bond-stats", str(good), "--config", str(cfg)]) == 0
    assert yaml.safe_load(cfg.read_text())["reward"]["bond_stats"] == "bond_stats.csv"
    assert (tmp_path / "bond_stats.csv").exists()


def test_export_round_trip(tmp_path):
    cfg = tmp_path / "default.yaml"
    assert main(["export", "--default-config", "--out", str(cfg)]) == 0
    assert cfg.read_text() == DEFAULT_CONFIG_TEXT
    (tmp_path / "s.json").write_text(json.dumps({"structure": {
        "lattice": {"a": 4, "b": 4, "c": 6, "alpha": 90, "beta": 90, "gamma": 90},
        "atoms": [{"z": 8, "frac": [0, 0, 0]}]}, "space_group": 131}))
    assert main(["export", str(tmp_path / "s.json"), "--out", str(tmp_path / "s.cif")]) == 0
    assert main(["export", str(tmp_path / "s.cif"), "--out", str(tmp_path / "back.json")]) == 0
    back = json.loads((tmp_path / "back.json").read_text())
    # the mirror holds the full cell; the group is carried as a tag, not re-expanded
    assert back["space_group"] == 131 and len(back["structure"]["atoms"]) == 1


def test_usage_errors_exit_nonzero(tmp_path, capsys):
    assert main(["train"]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["sample"]) == 2
    assert main(["nonsense"]) == 2
    (tmp_path / "bad.yaml").write_text("policy: {width: wide}\n")
    assert main(["train", "--config", str(tmp_path / "bad.yaml")]) == 2
    assert "policy.width" in capsys.readouterr().err


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "crystalgfn", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("train", "sample", "evaluate", "bond-stats", "export"):
        assert cmd in r.stdout

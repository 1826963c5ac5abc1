import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from bdlab import cli, nn
from bdlab.attack import load_trigger
from bdlab.docs import save_task
from bdlab.task import backdoor_distance
from instances import t4_spec, t4_task

QUICK_DOC = {
    "attack": {"benign_epochs": 150, "trigger_epochs": 60, "disc_epochs": 40, "refine_epochs": 30,
               "backdoor_epochs": 150, "hidden": [8], "trigger_hidden": [8], "disc_hidden": [8]},
    "n_train": 300,
    "search": {"restarts": 2, "steps": 10},
    "detect": {"n_eval": 100},
}


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def t4_file(tmp_path):
    path = tmp_path / "t4.json"
    save_task(path, t4_task(), t4_spec((1.0, 0.0)))
    return path


@pytest.fixture(scope="module")
def quick_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "quick.json"
    path.write_text(json.dumps(QUICK_DOC))
    return path


@pytest.fixture(scope="module")
def attack_dir(tmp_path_factory, quick_config):
    out = tmp_path_factory.mktemp("attack")
    assert cli.main(["--config", str(quick_config), "--seed", "3", "--out-dir", str(out), "attack"]) == 0
    return out


def test_distance_text(t4_file, capsys):
    assert cli.main(["distance", str(t4_file)]) == 0
    lines = dict(line.split() for line in capsys.readouterr().out.splitlines())
    assert float(lines["distance"]) == 0.25 and lines["bounds_sound"] == "true"


def test_distance_csv_to_file(t4_file, tmp_path, capsys):
    assert cli.main(["--out-dir", str(tmp_path / "o"), "distance", str(t4_file), "--format", "csv"]) == 0
    rows = {r["quantity"]: r["value"] for r in read_csv(tmp_path / "o" / "distance.csv")}
    assert float(rows["alpha"]) == 1.0
    assert capsys.readouterr().out.startswith("quantity,value\n")


def test_distance_out_of_scope_is_input_error(t4_file, capsys):
    assert cli.main(["distance", str(t4_file), "--beta", "0.5"]) == 2
    assert "Z =" in capsys.readouterr().err


def test_fired_check_gives_exit_one(t4_file, monkeypatch, capsys):
    def broken(task, spec):
        rep = backdoor_distance(task, spec)
        return replace(rep, distance=rep.upper_bound + 0.1)

    monkeypatch.setattr(cli, "backdoor_distance", broken)
    assert cli.main(["distance", str(t4_file)]) == 1
    assert "upper bound" in capsys.readouterr().err


def test_missing_file_is_input_error(tmp_path):
    assert cli.main(["distance", str(tmp_path / "nope.json")]) == 2


def test_estimate_kappa_csv(tmp_path, capsys):
    args = ["--seed", "2", "--out-dir", str(tmp_path), "estimate-kappa", "--region-b", "disc:0.5,0.5,0.2",
            "--region-ab", "disc:0.5,0.5,0.1", "--prior-mean", "0.5", "0.5", "--prior-scale", "0.3"]
    assert cli.main(args) == 0
    rows = read_csv(tmp_path / "kappa.csv")
    assert [r["quantity"] for r in rows] == ["ext_B", "ext_AB", "kappa_v", "ln_kappa_pr", "kappa"]
    assert all(r["seed"] == "2" for r in rows)
    assert float(rows[-1]["value"]) > 1.0
    first = (tmp_path / "kappa.csv").read_bytes()
    assert cli.main(args) == 0
    assert (tmp_path / "kappa.csv").read_bytes() == first


def test_estimate_kappa_regions_from_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"estimate_kappa": {"region_b": "square:0.5,0.5,0.4",
                                                  "region_ab": "box:0.4,0.4,0.6,0.6"}}))
    assert cli.main(["--config", str(cfg), "--out-dir", str(tmp_path), "estimate-kappa"]) == 0


@pytest.mark.parametrize("text", ["blob:1,2", "disc:0.5", "box:0,0,1", "disc:a,b,c"])
def test_bad_region(text):
    with pytest.raises(cli.InputError):
        cli.parse_region(text)


def test_attack_outputs(attack_dir):
    for name in ("benign.npz", "backdoored.npz", "trigger.npz", "attack_log.csv"):
        assert (attack_dir / name).exists()
    rows = read_csv(attack_dir / "attack_log.csv")
    assert list(rows[0]) == ["phase", "epoch", "loss", "asr", "alpha_estimate"]
    assert rows[0]["phase"] == "benign" and rows[-1]["phase"] == "final"
    trig = load_trigger(attack_dir / "trigger.npz")
    x = np.random.default_rng(0).random((50, 2))
    assert np.all(np.linalg.norm(trig(x) - x, axis=1) <= trig.delta + 1e-6)
    nn.load_model(attack_dir / "backdoored.npz")


def test_attack_is_reproducible(attack_dir, quick_config, tmp_path):
    assert cli.main(["--config", str(quick_config), "--seed", "3", "--out-dir", str(tmp_path), "attack"]) == 0
    assert (tmp_path / "attack_log.csv").read_bytes() == (attack_dir / "attack_log.csv").read_bytes()


def test_calibrate_then_detect(tmp_path, quick_config, attack_dir):
    refs = []
    for s in (11, 12, 13):
        d = tmp_path / f"r{s}"
        assert cli.main(["--config", str(quick_config), "--seed", str(s), "--out-dir", str(d), "attack"]) == 0
        refs.append(str(d / "benign.npz"))
    cal = tmp_path / "cal"
    assert cli.main(["--config", str(quick_config), "--out-dir", str(cal), "calibrate", *refs]) == 0
    th = read_csv(cal / "thresholds.csv")
    assert [r["detector"] for r in th] == ["output_diff", "hotelling", "weight_distance"]
    det_dir = tmp_path / "det"
    args = ["--config", str(quick_config), "--out-dir", str(det_dir), "detect",
            str(attack_dir / "backdoored.npz"), "--reference", *refs, "--thresholds", str(cal / "thresholds.csv")]
    assert cli.main(args) == 0
    rows = read_csv(det_dir / "detect.csv")
    assert list(rows[0]) == ["model_id", "detector", "score", "flagged"]
    assert len(rows) == 3 and {r["model_id"] for r in rows} == {"backdoored"}
    assert all(r["flagged"] in ("true", "false") for r in rows)


def test_detect_needs_reference(attack_dir, tmp_path):
    assert cli.main(["--out-dir", str(tmp_path), "detect", str(attack_dir / "backdoored.npz")]) == 2


def test_unknown_detector(attack_dir, tmp_path):
    args = ["--out-dir", str(tmp_path), "detect", str(attack_dir / "backdoored.npz"),
            "--reference", str(attack_dir / "benign.npz"), "--detectors", "spectral"]
    assert cli.main(args) == 2


def test_sweep_command(tmp_path, quick_config, capsys):
    args = ["--config", str(quick_config), "--seed", "1", "--out-dir", str(tmp_path), "sweep",
            "--alpha-stars", "0.3,0.9", "--n-benign", "2", "--n-backdoored", "2", "--n-reference", "1"]
    assert cli.main(args) == 0
    summary = {r["quantity"]: r["value"] for r in read_csv(tmp_path / "sweep_summary.csv")}
    assert summary["runs_launched"] == "4"
    assert len(read_csv(tmp_path / "sweep.csv")) == 2
    assert "pearson" in capsys.readouterr().out

import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from geokp.cli import main
from geokp.pcloud import read_manifest, read_xyz


@pytest.fixture
def data(tmp_path):
    assert main(["synth", "--generator", "bend", "--frames", "6", "--points", "64", "--out", str(tmp_path / "d")]) == 0
    return tmp_path / "d"


def test_synth_outputs(data):
    m = read_manifest(data / "manifest.json")
    assert len(m.frames) == 6 and all((data / f).exists() for f in m.frames)
    assert read_xyz(data / m.frames[0]).n == 64


def test_synth_idempotent(data, capsys):
    before = (data / "frame_0000.xyz").read_bytes()
    assert main(["synth", "--out", str(data), "--seed", "9", "--points", "64"]) == 0
    assert "skipping" in capsys.readouterr().out
    assert (data / "frame_0000.xyz").read_bytes() == before
    assert main(["synth", "--out", str(data), "--seed", "9", "--points", "64", "--force"]) == 0
    assert (data / "frame_0000.xyz").read_bytes() != before


def test_usage_errors(capsys):
    assert main(["frobnicate"]) == 1
    assert main([]) == 1
    assert main(["synth"]) == 1
    assert "usage" in capsys.readouterr().err


def test_runtime_error_json(tmp_path, capsys):
    (tmp_path / "c.xyz").write_text("0 0 0\n1 1 1\n2 2 2\n")
    rc = main(["infer", "--checkpoint", str(tmp_path / "none.gkpm"), "--input", str(tmp_path / "c.xyz")])
    assert rc == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "BadCheckpoint" and err["message"]


def test_end_to_end(data, tmp_path, capsys):
    manifest = data / "manifest.json"
    assert main(["preprocess", "--manifest", str(manifest), "--jobs", "2"]) == 0
    assert len(read_manifest(manifest).geodesics) == 6

    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "k_keypoints": 4, "m_recon": 16, "epochs": 2, "n_points": 64,
        "train_manifests": ["d/manifest.json"], "val_manifests": ["d/manifest.json"], "out_dir": "run",
    }))
    assert main(["train", "--config", str(cfg)]) == 0
    log = (tmp_path / "run" / "log.csv").read_text().splitlines()
    assert len(log) == 3

    ck = str(tmp_path / "run" / "last.gkpm")
    out = tmp_path / "rep.json"
    assert main(["eval", "--checkpoint", ck, "--manifest", str(manifest), "--protocol", "noise:0.01", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["protocol"] == "noise:0.01" and len(rep["pck"]) == 10
    assert (tmp_path / "rep.pck.csv").read_text().startswith("tau,pck\n")

    frame = str(data / "frame_0003.xyz")
    capsys.readouterr()
    assert main(["infer", "--checkpoint", ck, "--input", frame]) == 0
    kps = np.array([[float(v) for v in line.split()] for line in capsys.readouterr().out.splitlines()])
    assert kps.shape == (4, 3)
    assert main(["infer", "--checkpoint", ck, "--input", frame, "--out", str(tmp_path / "k.xyz")]) == 0
    assert np.array_equal(read_xyz(tmp_path / "k.xyz").points, kps)

    assert main(["perturb", "--input", frame, "--out", str(tmp_path / "p.xyz"), "--protocol", "fps:4"]) == 0
    assert read_xyz(tmp_path / "p.xyz").n == 16

    assert main(["diagnose-geodesics", "--manifest", str(manifest), "--out", str(tmp_path / "diag.json")]) == 0
    diag = json.loads((tmp_path / "diag.json").read_text())
    assert diag["n_pairs"] == len(diag["pairs"]) and diag["frame_b"] == 5


def test_train_seed_override(data, tmp_path):
    main(["preprocess", "--manifest", str(data / "manifest.json")])
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"k_keypoints": 3, "m_recon": 8, "epochs": 1, "n_points": 64,
                               "train_manifests": [str(data / "manifest.json")]}))
    for seed, name in ((0, "a"), (0, "b"), (1, "c")):
        assert main(["train", "--config", str(cfg), "--seed", str(seed), "--out-dir", str(tmp_path / name), "--jobs", "1"]) == 0
    read = lambda n: (tmp_path / n / "last.gkpm").read_bytes()
    assert read("a") == read("b") != read("c")


@pytest.mark.skipif(shutil.which("geokp") is None, reason="console script not installed")
def test_console_script(tmp_path):
    proc = subprocess.run(["geokp", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "geokp" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "geokp.cli", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 1

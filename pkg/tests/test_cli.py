import json
from pathlib import Path

import numpy as np
import pytest

from tonguekit.cli import main
from tonguekit.geometry import load_cloud
from tonguekit.synthdata import closed_dome, synth_volume
from tonguekit.volume import save_volume


def run(*argv):
    return main([str(a) for a in argv])


def _files(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and not p.name.endswith(".runlog.json")}


def test_unknown_subcommand(capsys):
    assert run("frobnicate") == 2
    assert "usage" in capsys.readouterr().err


def test_missing_template_path_names_key(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"paths": {"tongue_template": "nowhere.obj"}}))
    assert run("--config", cfg, "synth", tmp_path / "out") == 2
    assert "tongue_template" in capsys.readouterr().err


def test_bad_config_keys(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"match": {"betta": 1}}))
    assert run("--config", cfg, "synth", tmp_path / "out") == 2
    assert "betta" in capsys.readouterr().err


def test_runtime_failure_exit_1(tmp_path):
    (tmp_path / "bad.obj").write_text("v 0 0 0\nf 1 2 3\n")
    assert run("augment-cloud", tmp_path / "none.txt", tmp_path / "bad.obj", tmp_path / "o.txt") == 2
    (tmp_path / "c.txt").write_text("0 0 0 0 0 1\n")
    assert run("augment-cloud", tmp_path / "c.txt", tmp_path / "bad.obj", tmp_path / "o.txt") == 1


def test_volume_pipeline(tmp_path):
    solid = closed_dome(40, 160, (20.0, 14.0), 10.0, 4.0)
    save_volume(synth_volume(solid, spacing=(2.0, 2.0, 2.0), seed=1)[0], tmp_path / "v.vol")
    assert run("denoise", tmp_path / "v.vol", tmp_path / "d.vol", "--steps", 3) == 0
    assert run("segment", tmp_path / "d.vol", tmp_path / "p.part") == 0
    assert run("extract-cloud", tmp_path / "p.part", tmp_path / "c.txt") == 0
    assert len(load_cloud(tmp_path / "c.txt")) > 100
    log = json.loads((tmp_path / "extract-cloud.runlog.json").read_text())
    assert log["status"] == "ok" and len(next(iter(log["inputs"].values()))) == 64


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    assert run("synth", root / "synth", "--amplitude", 60, "--basis", "articulatory", "--frames", 40) == 0
    assert run("build-model", root / "synth" / "manifest.json", root / "model.bin", "--truncate", 3, 2) == 0
    return root


def test_synth_outputs(corpus):
    names = set(_files(corpus / "synth"))
    for f in ("manifest.json", "template.obj", "markers.json", "correspondences.json", "markers_truth.json"):
        assert f in names
    assert (corpus / "synth" / "synth.runlog.json").exists()


def test_evaluate_and_track(corpus):
    out = corpus / "eval"
    assert run("--jobs", 2, "evaluate", corpus / "model.bin", corpus / "synth" / "manifest.json", out,
               "--samples", 40, "--metrics", "compactness,specificity,fixed-phone") == 0
    assert (out / "specificity_speaker.csv").exists() and (out / "figures" / "compactness_pose.png").exists()
    assert (out / "curves.dat").exists()
    trk = corpus / "track" / "traj.json"
    assert run("track", corpus / "model.bin", corpus / "synth" / "markers.json", trk,
               "--correspondences", corpus / "synth" / "correspondences.json", "--anatomy", "fixed") == 0
    traj = json.loads(trk.read_text())
    assert len(traj["frames"]) == 40
    assert (corpus / "track" / "figures" / "traj_weights.png").exists()


def test_fit_model_fixed(corpus, tmp_path):
    mesh = next((corpus / "synth" / "meshes").glob("*.obj"))
    assert run("fit-model", corpus / "model.bin", tmp_path / "fit.json", "--fixed-correspondences", mesh,
               "--h", 10, "--mesh", tmp_path / "fit.obj") == 0
    res = json.loads((tmp_path / "fit.json").read_text())
    assert res["residual"]["mean"] < 1e-6


def test_bad_metric(corpus, tmp_path):
    assert run("evaluate", corpus / "model.bin", corpus / "synth" / "manifest.json", tmp_path,
               "--metrics", "beauty") == 2


def test_reruns_byte_identical(tmp_path):
    for k in (1, 2):
        d = tmp_path / f"r{k}"
        assert run("--seed", 3, "synth", d / "s", "--frames", 10, "--speakers", 4, "--poses", 3,
                   "--rank-speaker", 2, "--rank-pose", 1) == 0
        assert run("build-model", d / "s" / "manifest.json", d / "m.bin") == 0
        assert run("--seed", 3, "--jobs", k, "evaluate", d / "m.bin", d / "s" / "manifest.json", d / "ev",
                   "--samples", 20, "--metrics", "compactness,specificity") == 0
    assert _files(tmp_path / "r1") == _files(tmp_path / "r2")
    assert np.array_equal(np.frombuffer((tmp_path / "r1" / "m.bin").read_bytes(), np.uint8),
                          np.frombuffer((tmp_path / "r2" / "m.bin").read_bytes(), np.uint8))

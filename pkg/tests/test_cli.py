import hashlib
import json

import numpy as np
import pytest

from activeseg.cli import main
from activeseg.volume import LabelVolume, write_mhd

TINY_CONFIG = {
    "phantom": {"dims": [20, 20, 12], "organ_count": [1, 1], "organ_semi_axes": [[3, 5], [3, 5], [2, 3]],
                "lesion_radius": [1, 2]},
    "splits": {"pool": 3, "val": 1, "test": 2},
    "initial_volumes": 1,
    "iterations": 1,
    "budget": {"volumes_per_iteration": 1},
    "train": {"max_steps": 20, "val_interval": 10},
    "mc_samples": 2,
}


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY_CONFIG))
    return p


def _hashes(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_help_exits_zero(capsys):
    assert main(["run", "--help"]) == 0
    assert "--arms" in capsys.readouterr().out


def test_unknown_flag_is_usage_error(capsys):
    assert main(["run", "--out", "x", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main([]) == 1
    assert main(["run", "--out", "x", "--arms", "uvs,abc"]) == 1


def test_invalid_setting_is_usage_error(tmp_path, config_file):
    assert main(["run", "--config", str(config_file), "--out", str(tmp_path / "o"), "--iterations", "-2"]) == 1


def test_generate_twice_identical(tmp_path, config_file):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["generate", "--config", str(config_file), "--seed", "7", "--out", str(a)]) == 0
    assert main(["generate", "--config", str(config_file), "--seed", "7", "--out", str(b)]) == 0
    assert _hashes(a) == _hashes(b)
    assert main(["generate", "--config", str(config_file), "--seed", "8", "--out", str(tmp_path / "c")]) == 0
    assert _hashes(a) != _hashes(tmp_path / "c")


def test_evaluate_identical_volumes(tmp_path, capsys):
    m = np.zeros((6, 6, 6), dtype=np.uint8)
    m[1:4, 2:5, 1:3] = 1
    write_mhd(tmp_path / "p.mha", LabelVolume(m, (1, 1, 1.5)))
    assert main(["evaluate", str(tmp_path / "p.mha"), str(tmp_path / "p.mha")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[1] == "1.0,0.0,0.0,0.0"


def test_evaluate_missing_file_is_data_error(tmp_path, capsys):
    assert main(["evaluate", str(tmp_path / "nope.mha"), str(tmp_path / "nope.mha")]) == 2


def test_evaluate_corrupt_file_is_data_error(tmp_path):
    (tmp_path / "bad.mha").write_bytes(b"ObjectType = Image\nNDims = 4\nElementDataFile = LOCAL\n")
    assert main(["evaluate", str(tmp_path / "bad.mha"), str(tmp_path / "bad.mha")]) == 2


def test_train_uncertainty_and_report(tmp_path, config_file, capsys):
    data = tmp_path / "data"
    assert main(["generate", "--config", str(config_file), "--out", str(data)]) == 0
    ckpt = tmp_path / "model.json"
    assert main(["train", "--manifest", str(data / "manifest.json"), "--config", str(config_file),
                 "--out", str(ckpt)]) == 0
    assert ckpt.exists()
    assert main(["train", "--manifest", str(data / "manifest.json"), "--config", str(config_file),
                 "--out", str(ckpt), "--volumes", "pool_999"]) == 2
    udir = tmp_path / "unc"
    assert main(["uncertainty", "--checkpoint", str(ckpt), "--image", str(data / "data" / "test_000_image.mha"),
                 "--out", str(udir), "--samples", "3"]) == 0
    prof = json.loads((udir / "profile.json").read_text())
    assert len(prof["values"]) == 12 and all(0 <= v <= np.log(2) for v in prof["values"])
    assert (udir / "entropy.mha").exists()


def test_run_and_report(tmp_path, config_file, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(config_file), "--out", str(out), "--arms", "rvs,rss"]) == 0
    summary = tmp_path / "summary.csv"
    assert main(["report", str(out / "cases.csv"), "--out", str(summary)]) == 0
    assert summary.read_text() == (out / "summary.csv").read_text()
    (tmp_path / "junk.csv").write_text("a,b\n1,2\n")
    assert main(["report", str(tmp_path / "junk.csv")]) == 2

import json

import numpy as np
import pytest

from hbev import io as hio
from hbev.cli import main
from hbev.config import load_config
from hbev.geometry import Pose2
from hbev.gridmap import ELEVATION, GridMap, GridSpec

SMALL = """
[grid]
extent = 16.0
resolution = 0.5
[world]
extent = 40.0
duration = 6.0
n_obstacles = 4
[sensor]
azimuth_resolution = 4.0
channels = 8
"""


def run(capsys, *args) -> tuple[int, str, str]:
    code = main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return path


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_full_pipeline_and_byte_identical_rerun(tmp_path, config, capsys):
    outputs = []
    for k, jobs in enumerate((1, 2)):
        base = tmp_path / f"run{k}"
        assert run(capsys, "--config", config, "-j", jobs, "gen-world", "--seed", 3, "--out", base / "ds")[0] == 0
        assert run(capsys, "--config", config, "-j", jobs, "hindsight", "--maps", base / "ds",
                   "--window", 4.0, "--out", base / "hs")[0] == 0
        code, _, err = run(capsys, "--config", config, "-j", jobs, "evaluate", "--gt", base / "hs",
                           "--pred", base / "ds" / "estimates", "--clouds", base / "ds" / "clouds",
                           "--out", base / "report.json", "--csv", base / "bins.csv")
        assert code == 0, err
        outputs.append(base)
    a, b = _tree(outputs[0]), _tree(outputs[1])
    assert a.keys() == b.keys() and a == b

    manifest = json.loads((outputs[0] / "ds" / "manifest.json").read_text())
    assert len(manifest["steps"]) == 7 and len(manifest["config_hash"]) == 64
    step = manifest["steps"][0]
    for key in ("cloud", "estimate", "oracle"):
        assert (outputs[0] / "ds" / step[key]).exists()
    hs = json.loads((outputs[0] / "hs" / "manifest.json").read_text())
    assert hs["samples"] and all((outputs[0] / "hs" / s["gt"]).exists() for s in hs["samples"])
    report = json.loads((outputs[0] / "report.json").read_text())
    assert report["n_samples"] == len(hs["samples"]) == len(report["pairs"])
    # each command hashes the config it ran with, command-line overrides included
    assert report["config_hash"] == load_config(config).config_hash()
    assert manifest["config_hash"] == load_config(config).updated("world", seed=3).config_hash()

    code, _, _ = run(capsys, "plot", outputs[0] / "bins.csv", "--out", tmp_path / "plots")
    assert code == 0
    assert sorted(p.name for p in (tmp_path / "plots").iterdir()) == ["elevation_mae.svg", "hazard.svg", "mse.svg"]


def _write_line_of_maps(root, n, spacing):
    spec = GridSpec(8, 8, 0.5)
    for i in range(n):
        m = GridMap(spec.with_pose(Pose2(0.0, (i * spacing, 0.0))), timestamp=float(i))
        m.set_cell(ELEVATION, 4, 4, float(i))
        hio.write_gridmap(root / f"m{i:03d}.hbgm", m)


def test_hindsight_reference_selection_on_plain_directory(tmp_path, capsys):
    _write_line_of_maps(tmp_path / "maps", 100, 0.1)
    code, _, err = run(capsys, "hindsight", "--maps", tmp_path / "maps", "--window", 2.0, "--out", tmp_path / "out")
    assert code == 0, err
    assert len(list((tmp_path / "out" / "gt").glob("*.hbgm"))) == 50
    code, _, _ = run(capsys, "hindsight", "--maps", tmp_path / "maps", "--ref-time", 10.2, "--out", tmp_path / "one")
    names = [s["name"] for s in json.loads((tmp_path / "one" / "manifest.json").read_text())["samples"]]
    assert names == ["m010"]


def test_hindsight_empty_dataset(tmp_path, capsys):
    (tmp_path / "maps").mkdir()
    code, out, _ = run(capsys, "hindsight", "--maps", tmp_path / "maps", "--out", tmp_path / "out")
    assert code == 0 and "wrote 0" in out
    assert json.loads((tmp_path / "out" / "manifest.json").read_text())["samples"] == []


def test_errors_are_json_on_stderr(tmp_path, capsys):
    code, _, err = run(capsys, "hindsight", "--maps", tmp_path / "missing", "--out", tmp_path / "out")
    assert code != 0
    doc = json.loads(err)
    assert doc["path"].endswith("missing") and doc["message"]
    (tmp_path / "gt").mkdir()
    (tmp_path / "pred").mkdir()
    _write_line_of_maps(tmp_path / "gt", 2, 1.0)
    code, _, err = run(capsys, "evaluate", "--gt", tmp_path / "gt", "--pred", tmp_path / "pred",
                       "--out", tmp_path / "r.json")
    assert code != 0 and json.loads(err)["path"].endswith("m000.hbgm")
    (tmp_path / "bad.toml").write_text("[grid]\nwhat = 1\n")
    code, _, err = run(capsys, "--config", tmp_path / "bad.toml", "hindsight", "--maps", tmp_path / "gt",
                       "--out", tmp_path / "o")
    assert code != 0 and "error" in json.loads(err)
    assert not (tmp_path / "o").exists()


def test_lift_synthetic_rig(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[grid]\nextent = 40.0\nresolution = 0.5\n")
    code, out, _ = run(capsys, "--config", cfg, "lift", "--out", tmp_path / "bev.hbgm", "--bench", "--repeats", 1)
    assert code == 0
    stats = json.loads(out)
    assert stats["points"] == 706_560 and stats["points_per_second"] > 0
    grid = hio.read_gridmap(tmp_path / "bev.hbgm")
    assert grid.layer_names == ["feature_000"]
    # four cameras, unit features: the splatted mass is the in-grid share of 4 * 24 * 32 pixels
    assert 0 < grid.layers["feature_000"].sum() <= 4 * 24 * 32 + 1e-3


def test_lift_rejects_bad_logits(tmp_path, capsys):
    hio.write_tensor(tmp_path / "l.hblt", np.zeros((4, 2, 2, 3), dtype=np.float32))
    code, _, err = run(capsys, "lift", "--logits", tmp_path / "l.hblt")
    assert code != 0 and json.loads(err)["path"].endswith("l.hblt")

import json

import numpy as np
import pytest

from fisheye_splat.cli import main
from fisheye_splat.core.camera_models import CameraPose, save_cameras
from fisheye_splat.core.ply_io import write_gaussian_ply
from fisheye_splat.core.synthetic import make_synthetic_dataset, mei_camera, pinhole_camera, random_gaussians
from fisheye_splat.core.utils import read_plane


@pytest.fixture
def scene_ply(tmp_path, rng):
    path = tmp_path / "scene.ply"
    g = random_gaussians(40, rng, center=(0.0, 0.0, 4.0), spread=(1.5, 1.5, 0.5), scale_range=(0.1, 0.3),
                         num_classes=2)
    write_gaussian_ply(path, g, precision="f8")
    return path


@pytest.fixture
def cameras_json(tmp_path):
    path = tmp_path / "cameras.json"
    save_cameras(path, [(pinhole_camera(32, 24, 60.0, "front"), CameraPose()),
                        (mei_camera(32, 32, 1.0, 0.7, "fish"), CameraPose())])
    return path


@pytest.fixture(scope="module")
def dataset_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_dataset")
    make_synthetic_dataset(root, n_gaussians=50, views_per_camera=1, resolution=32, seed=7)
    return root


def test_render(tmp_path, scene_ply, cameras_json):
    out = tmp_path / "render"
    assert main(["render", "--scene", str(scene_ply), "--cameras", str(cameras_json), "--out", str(out)]) == 0
    for cam, shape in (("front", (24, 32)), ("fish", (32, 32))):
        assert (out / cam / "color.png").exists()
        assert (out / cam / "depth_preview.png").exists()
        depth = read_plane(out / cam / "depth.f32")
        assert depth.shape[:2] == shape
        semantic = read_plane(out / cam / "semantic.f32")
        assert semantic.shape[2] == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "render"
    assert manifest["seed"] == 0
    assert len(manifest["config_hash"]) == 64
    assert manifest["inputs"]["scene"] == str(scene_ply)


def test_manifest_is_reproducible(tmp_path, scene_ply, cameras_json):
    args = ["render", "--scene", str(scene_ply), "--cameras", str(cameras_json), "--stretch", "off"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert a["config_hash"] != b["config_hash"]
    a["config"]["render"].pop("threads")
    b["config"]["render"].pop("threads")
    assert a["config"] == b["config"]
    assert a["config"]["render"]["stretch_polar"] is False
    np.testing.assert_array_equal(read_plane(tmp_path / "a" / "fish" / "depth.f32"),
                                  read_plane(tmp_path / "b" / "fish" / "depth.f32"))


def test_convert_camera(tmp_path, cameras_json):
    out = tmp_path / "converted"
    assert main(["convert-camera", "--cameras", str(cameras_json), "--out", str(out)]) == 0
    report = json.loads((out / "conversion.json").read_text())
    assert [r["camera_id"] for r in report["conversions"]] == ["fish"]
    assert report["conversions"][0]["max_residual_rad"] < 1e-2
    cameras = json.loads((out / "cameras.json").read_text())
    assert sorted(c["kind"] for c in cameras) == ["kb", "pinhole"]


def test_usage_errors_exit_with_two(tmp_path, scene_ply, cameras_json, capsys):
    assert main(["render", "--scene", str(scene_ply), "--cameras", str(cameras_json),
                 "--out", str(tmp_path), "--bogus"]) == 2
    assert "--bogus" in capsys.readouterr().err
    assert main(["launch"]) == 2
    assert main(["render", "--scene", str(scene_ply)]) == 2


def test_config_errors_exit_with_two(tmp_path, scene_ply, cameras_json):
    base = ["render", "--scene", str(scene_ply), "--cameras", str(cameras_json), "--out", str(tmp_path / "o")]
    assert main(base + ["--set", "train.iterations=-1"]) == 2
    assert main(base + ["--seed", "-3"]) == 2
    assert main(base + ["--config", str(tmp_path / "missing.toml")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[render]\norder = 7\n")
    assert main(base + ["--config", str(bad)]) == 2


def test_bad_input_files_exit_with_two(tmp_path, cameras_json):
    assert main(["render", "--scene", str(tmp_path / "nope.ply"), "--cameras", str(cameras_json),
                 "--out", str(tmp_path / "o")]) == 2


def test_lidar_sim(tmp_path, rng):
    scene = tmp_path / "blob.ply"
    write_gaussian_ply(scene, random_gaussians(30, rng, center=(5.0, 0.0, 0.0), spread=(0.5, 2.0, 1.0),
                                               scale_range=(0.3, 0.6), opacity_range=(0.8, 0.95)))
    pattern = tmp_path / "pattern.json"
    pattern.write_text(json.dumps({"azimuth": {"start": -20, "stop": 21, "step": 5}, "elevations": [-5, 0, 5],
                                   "origin": [0.0, 0.0, 0.0]}))
    out = tmp_path / "scan"
    assert main(["lidar-sim", "--scene", str(scene), "--pattern", str(pattern), "--out", str(out),
                 "--set", "lidar.resolution=32"]) == 0
    meta = json.loads((out / "scan.json").read_text())
    assert meta["returns"] + meta["dropped_outside"] + meta["dropped_no_surface"] == 27
    assert meta["returns"] > 0
    assert (out / "scan.ply").exists()


def test_error_analysis(tmp_path, scene_ply, cameras_json):
    out = tmp_path / "analysis"
    assert main(["error-analysis", "--scene", str(scene_ply), "--cameras", str(cameras_json), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["camera_id"] == "fish"
    assert len(report["rows"]) == 5
    assert (out / "report.csv").exists() and (out / "report.png").exists()


def test_error_analysis_needs_a_fisheye(tmp_path, scene_ply):
    cams = tmp_path / "pinhole_only.json"
    save_cameras(cams, [(pinhole_camera(16, 16), CameraPose())])
    assert main(["error-analysis", "--scene", str(scene_ply), "--cameras", str(cams), "--out", str(tmp_path / "o")]) == 2


def test_train_then_eval(tmp_path, dataset_root):
    config = tmp_path / "run.toml"
    config.write_text("[train]\niterations = 2\nsky_gaussians = 0\nsh_degree = 1\n")
    out = tmp_path / "train"
    assert main(["train", "--dataset", str(dataset_root), "--config", str(config), "--out", str(out)]) == 0
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 2
    assert (out / "scene" / "scene.json").exists()

    ev = tmp_path / "eval"
    assert main(["eval", "--scene", str(out / "scene"), "--dataset", str(dataset_root), "--out", str(ev)]) == 0
    metrics = json.loads((ev / "metrics.json").read_text())
    assert set(metrics["summary"]) == {"pinhole", "fisheye"}
    assert len(metrics["zones"]) == 1
    zones = next(iter(metrics["zones"].values()))
    assert set(zones) <= {"A", "B", "C"} and zones


def test_error_analysis_reports_are_byte_identical(tmp_path, scene_ply, cameras_json):
    for name in ("a", "b"):
        assert main(["error-analysis", "--scene", str(scene_ply), "--cameras", str(cameras_json),
                     "--out", str(tmp_path / name)]) == 0
    for file in ("report.csv", "report.json", "manifest.json"):
        assert (tmp_path / "a" / file).read_bytes() == (tmp_path / "b" / file).read_bytes()
    assert "wall_ms" not in (tmp_path / "a" / "report.csv").read_text().splitlines()[0]

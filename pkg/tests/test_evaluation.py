import csv
import json
import math

import numpy as np
import pytest
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from fisheye_splat.core.camera_models import CameraKind, CameraModel, CameraPose, unproject_pixels
from fisheye_splat.core.evaluation import (
    DEFAULT_GRID,
    AnalysisConfig,
    default_zones,
    psnr,
    redistort_image,
    reference_pinhole,
    run_error_analysis,
    ssim,
    ssim_map,
    ssim_with_grad,
    undistort_image,
    write_report_csv,
    write_report_json,
    zone_metrics,
)
from fisheye_splat.core.synthetic import mei_camera, random_gaussians


def skimage_ssim(a, b):
    return structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                 data_range=1.0, channel_axis=2 if a.ndim == 3 else None)


def smooth_image(h, w):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    r = 0.5 + 0.2 * np.sin(xs / 9.0) * np.cos(ys / 11.0)
    g = 0.5 + 0.2 * np.cos((xs + ys) / 13.0)
    b = 0.4 + 0.1 * np.sin(ys / 7.0)
    return np.stack([r, g, b], axis=2)


# ---------------------------------------------------------------------------
# PSNR / SSIM
# ---------------------------------------------------------------------------

def test_psnr_examples(rng):
    a = rng.uniform(size=(16, 16, 3))
    assert psnr(a, a) == 99.0
    assert psnr(np.full((4, 4), 0.5), np.full((4, 4), 0.6)) == pytest.approx(20.0)
    b = np.clip(a + rng.normal(scale=0.05, size=a.shape), 0.0, 1.0)
    assert psnr(a, b) == pytest.approx(peak_signal_noise_ratio(a, b, data_range=1.0), abs=1e-9)
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ValueError):
        psnr(a, a[:8])


def test_ssim_identity_and_symmetry(rng):
    a = rng.uniform(size=(24, 24, 3))
    b = rng.uniform(size=(24, 24, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_matches_reference(rng):
    a = rng.uniform(size=(32, 40, 3))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0.0, 1.0)
    assert ssim(a, b) == pytest.approx(skimage_ssim(a, b), abs=1e-7)
    gray_a, gray_b = a[:, :, 0], b[:, :, 0]
    assert ssim(gray_a, gray_b) == pytest.approx(skimage_ssim(gray_a, gray_b), abs=1e-7)


def test_ssim_of_inverted_checker_is_strongly_negative():
    checker = (np.indices((32, 32)).sum(axis=0) % 2).astype(np.float64)
    value = ssim(checker, 1.0 - checker)
    assert value < -0.9
    assert value == pytest.approx(skimage_ssim(checker, 1.0 - checker), abs=1e-7)


def test_ssim_map_shape(rng):
    a = rng.uniform(size=(20, 22, 3))
    assert ssim_map(a, a).shape == (20, 22)


def test_ssim_gradient(rng):
    x = rng.uniform(0.1, 0.9, (18, 18, 2))
    y = rng.uniform(0.1, 0.9, (18, 18, 2))
    value, grad = ssim_with_grad(x, y)
    assert value == pytest.approx(ssim(x, y), abs=1e-12)
    h = 1e-6
    flat = x.reshape(-1)
    for j in rng.choice(flat.size, size=15, replace=False):
        plus, minus = flat.copy(), flat.copy()
        plus[j] += h
        minus[j] -= h
        fd = (ssim(plus.reshape(x.shape), y) - ssim(minus.reshape(x.shape), y)) / (2 * h)
        assert grad.reshape(-1)[j] == pytest.approx(fd, rel=1e-4, abs=1e-9)


# ---------------------------------------------------------------------------
# zones
# ---------------------------------------------------------------------------

def test_default_zones(mei_32):
    zones = default_zones(mei_32)
    assert set(zones) == {"A", "B", "C"}
    rays, valid = unproject_pixels(mei_32, np.stack(np.meshgrid(np.arange(32.0), np.arange(32.0)), -1).reshape(-1, 2))
    circle = valid.reshape(32, 32)
    theta = np.arccos(np.clip(rays[:, 2], -1.0, 1.0)).reshape(32, 32)
    for name, mask in zones.items():
        assert mask.shape == (32, 32)
        assert mask.any(), name
        assert not (mask & ~circle).any()
    assert not zones["A"][:24].any()
    assert not zones["B"][8:].any()
    assert theta[zones["C"]].min() >= 0.75 * mei_32.theta_max


def test_zone_metrics(rng):
    a = rng.uniform(size=(24, 24, 3))
    b = np.clip(a + rng.normal(scale=0.05, size=a.shape), 0.0, 1.0)
    full = np.ones((24, 24), dtype=bool)
    out = zone_metrics(a, b, {"all": full})
    assert out["all"]["psnr"] == pytest.approx(psnr(a, b))
    assert out["all"]["ssim"] == pytest.approx(ssim(a, b))
    assert out["all"]["pixels"] == 24 * 24

    left = np.zeros((24, 24), dtype=bool)
    left[:, :10] = True
    halves = zone_metrics(a, b, {"left": left, "right": ~left})
    mse = sum(10.0 ** (-halves[k]["psnr"] / 10.0) * halves[k]["pixels"] for k in halves) / (24 * 24)
    assert mse == pytest.approx(np.mean((a - b) ** 2), rel=1e-9)


def test_zone_errors(rng):
    a = rng.uniform(size=(8, 8))
    with pytest.raises(ValueError, match="empty"):
        zone_metrics(a, a, {"A": np.zeros((8, 8), dtype=bool)})
    with pytest.raises(ValueError, match="shape"):
        zone_metrics(a, a, {"A": np.ones((4, 4), dtype=bool)})


# ---------------------------------------------------------------------------
# remapping
# ---------------------------------------------------------------------------

def test_redistort_identity(rng):
    pin = CameraModel(kind=CameraKind.PINHOLE, width=40, height=30, u0=19.5, v0=14.5, fx=30.0, fy=30.0)
    mei = CameraModel(kind=CameraKind.MEI, width=40, height=30, u0=19.5, v0=14.5, gamma1=30.0, gamma2=30.0, xi=0.0)
    img = rng.uniform(size=(30, 40, 3))
    out, valid = redistort_image(img, pin, mei)
    assert valid[1:-1, 1:-1].all()
    np.testing.assert_allclose(out[1:-1, 1:-1], img[1:-1, 1:-1], atol=1e-6)


def test_constant_image_stays_constant():
    fish = mei_camera(48, 48, xi=1.0)
    pin = reference_pinhole(fish, 60.0)
    out, valid = redistort_image(np.full((pin.height, pin.width), 0.7), pin, fish, fill=-1.0)
    assert valid.any() and not valid.all()
    np.testing.assert_allclose(out[valid], 0.7, atol=1e-6)
    assert np.all(out[~valid] == -1.0)


def test_distort_undistort_round_trip():
    fish = mei_camera(64, 64, xi=1.0)
    pin = reference_pinhole(fish, 60.0)
    img = smooth_image(pin.height, pin.width)
    fish_img, fish_valid = redistort_image(img, pin, fish)
    back, back_valid = undistort_image(fish_img, fish, pin)
    coverage, _ = undistort_image(fish_valid.astype(np.float64), fish, pin)
    region = back_valid & (coverage >= 1.0 - 1e-6)
    assert np.count_nonzero(region) > 500
    assert psnr(back[region], img[region]) >= 45.0


def test_reference_pinhole_contains_fisheye_grid(mei_32):
    pin = reference_pinhole(mei_32, 70.0)
    assert pin.kind is CameraKind.PINHOLE
    assert pin.fx == mei_32.fx
    assert pin.width >= mei_32.width and pin.height >= mei_32.height
    assert (pin.width - mei_32.width) % 2 == 0
    assert pin.u0 - mei_32.u0 == (pin.width - mei_32.width) // 2
    assert pin.u0 >= pin.fx * math.tan(math.radians(70.0)) - 1e-9


# ---------------------------------------------------------------------------
# error analysis
# ---------------------------------------------------------------------------

def analysis_scene(rng):
    return random_gaussians(60, rng, center=(0.0, 0.0, 4.0), spread=(2.0, 2.0, 0.8), scale_range=(0.1, 0.35))


def test_analysis_grid_labels():
    assert [c.label for c in DEFAULT_GRID] == [
        "phi=x,theta=x", "phi=x,theta=1", "phi=1,theta=x", "phi=1,theta=1", "phi=1,theta=2"]
    opts = AnalysisConfig(True, True, 2).warp_options()
    assert opts.order == 2


def test_error_analysis_report(rng, tmp_path):
    fish = mei_camera(32, 32, xi=1.0, camera_id="fish")
    poses = [CameraPose(), CameraPose(np.eye(3), np.array([0.3, 0.0, 0.0]))]
    report = run_error_analysis(analysis_scene(rng), poses, fish)
    assert len(report.rows) == 5
    assert report.poses == 2 and report.roi_pixels > 0
    for row in report.rows:
        assert 0.0 < row.psnr <= 99.0
        assert -1.0 <= row.ssim <= 1.0
        assert row.wall_ms is None
    assert report.row("phi=1,theta=2").order == 2
    with pytest.raises(KeyError):
        report.row("nope")

    write_report_csv(report, tmp_path / "out" / "report.csv")
    with open(tmp_path / "out" / "report.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["label"] for r in rows] == [r.label for r in report.rows]
    assert "wall_ms" not in rows[0]
    write_report_json(report, tmp_path / "report.json")
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["camera_id"] == "fish" and len(data["rows"]) == 5
    assert "wall_ms" not in data["rows"][0]


def test_error_analysis_wall_time_is_opt_in(rng, tmp_path):
    fish = mei_camera(32, 32, xi=1.0, camera_id="fish")
    grid = DEFAULT_GRID[:2]
    report = run_error_analysis(analysis_scene(rng), [CameraPose()], fish, grid=grid, record_wall_time=True)
    assert all(row.wall_ms > 0.0 for row in report.rows)
    write_report_csv(report, tmp_path / "report.csv")
    with open(tmp_path / "report.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert float(rows[0]["wall_ms"]) == pytest.approx(report.rows[0].wall_ms)
    assert report.to_dict()["rows"][1]["wall_ms"] == report.rows[1].wall_ms


def test_error_analysis_reports_are_reproducible(rng, tmp_path):
    fish = mei_camera(32, 32, xi=1.0, camera_id="fish")
    scene = analysis_scene(rng)
    for name in ("a", "b"):
        report = run_error_analysis(scene, [CameraPose()], fish)
        write_report_csv(report, tmp_path / name / "report.csv")
        write_report_json(report, tmp_path / name / "report.json")
    for file in ("report.csv", "report.json"):
        assert (tmp_path / "a" / file).read_bytes() == (tmp_path / "b" / file).read_bytes()


def test_identity_fisheye_matches_reference(rng):
    fish = CameraModel(kind=CameraKind.MEI, width=48, height=48, u0=23.5, v0=23.5, gamma1=40.0, gamma2=40.0, xi=0.0)
    report = run_error_analysis(analysis_scene(rng), [CameraPose()], fish)
    for row in report.rows:
        assert row.psnr >= 50.0, row.label


@pytest.mark.slow
def test_stretching_helps_under_strong_distortion(rng):
    fish = mei_camera(96, 96, xi=1.5, gamma_ratio=0.9, camera_id="wide")
    scene = random_gaussians(400, rng, center=(0.0, 0.0, 3.0), spread=(4.0, 4.0, 1.5), scale_range=(0.1, 0.4))
    grid = (AnalysisConfig(False, False, 1), AnalysisConfig(True, True, 1))
    report = run_error_analysis(scene, [CameraPose()], fish, grid=grid)
    assert report.row("phi=1,theta=1").psnr >= report.row("phi=x,theta=x").psnr

# ============================================
# core/evaluation.py
# ============================================
"""
Image metrics, local zones, pinhole <-> fisheye image remapping and the
convert-project vs project-convert error analysis.
"""
import csv
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import cv2
import numpy as np

from fisheye_splat.core.camera_models import (
    CameraKind,
    CameraModel,
    project_points_masked,
    unproject_pixels,
)
from fisheye_splat.core.fisheye_warp import WarpOptions
from fisheye_splat.core.log_utils import get_logger
from fisheye_splat.core.rasterizer import RenderOptions, render
from fisheye_splat.core.utils import save_json

logger = get_logger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_PAD = (SSIM_WINDOW - 1) // 2


# ---------------------------------------------------------------------------
# PSNR / SSIM
# ---------------------------------------------------------------------------

def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _blur(x):
    return cv2.GaussianBlur(x, (SSIM_WINDOW, SSIM_WINDOW), SSIM_SIGMA, borderType=cv2.BORDER_REFLECT)


def _blur_adjoint(x):
    # only applied to maps that vanish within SSIM_PAD of the border
    return cv2.GaussianBlur(x, (SSIM_WINDOW, SSIM_WINDOW), SSIM_SIGMA, borderType=cv2.BORDER_CONSTANT)


def _channels(img):
    return img[:, :, None] if img.ndim == 2 else img


def _ssim_stats(a, b, data_range=1.0):
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _blur(a), _blur(b)
    e_aa, e_bb, e_ab = _blur(a * a), _blur(b * b), _blur(a * b)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num1 = 2.0 * mu_a * mu_b + c1
    num2 = 2.0 * cov + c2
    den1 = mu_a * mu_a + mu_b * mu_b + c1
    den2 = var_a + var_b + c2
    return {"mu_a": mu_a, "mu_b": mu_b, "num1": num1, "num2": num2, "den1": den1, "den2": den2,
            "map": (num1 * num2) / (den1 * den2)}


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    """Per-pixel SSIM averaged over channels (HxW)."""
    a, b = _check_pair(a, b)
    a, b = _channels(a), _channels(b)
    maps = [_ssim_stats(a[:, :, c], b[:, :, c], data_range)["map"] for c in range(a.shape[2])]
    return np.mean(maps, axis=0)


def interior_mask(shape) -> np.ndarray:
    mask = np.zeros(shape[:2], dtype=bool)
    if shape[0] > 2 * SSIM_PAD and shape[1] > 2 * SSIM_PAD:
        mask[SSIM_PAD:-SSIM_PAD, SSIM_PAD:-SSIM_PAD] = True
    else:
        mask[:] = True
    return mask


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over the pixels at least half a window away from the border."""
    smap = ssim_map(a, b, data_range)
    return float(np.mean(smap[interior_mask(smap.shape)]))


def ssim_with_grad(x, y, data_range: float = 1.0):
    """(ssim(x, y), d ssim / d x) for the same windowed mean as ``ssim``."""
    x, y = _check_pair(x, y)
    squeeze = x.ndim == 2
    x, y = _channels(x), _channels(y)
    h, w, channels = x.shape
    inner = interior_mask((h, w))
    weight = inner / (np.count_nonzero(inner) * channels)

    total = 0.0
    grad = np.zeros_like(x)
    for c in range(channels):
        xc, yc = x[:, :, c], y[:, :, c]
        st = _ssim_stats(xc, yc, data_range)
        s = st["map"]
        total += float(np.sum(s * weight))
        d12 = st["den1"] * st["den2"]
        # derivatives of the map w.r.t. mu_x, E[x^2] and E[xy]
        d_mu = (2.0 * st["mu_b"] * st["num2"] - 2.0 * st["mu_b"] * st["num1"]) / d12 \
            - s * (2.0 * st["mu_a"] / st["den1"] - 2.0 * st["mu_a"] / st["den2"])
        d_exx = -s / st["den2"]
        d_exy = 2.0 * st["num1"] / d12
        grad[:, :, c] = (_blur_adjoint(weight * d_mu)
                         + 2.0 * xc * _blur_adjoint(weight * d_exx)
                         + yc * _blur_adjoint(weight * d_exy))
    return total, (grad[:, :, 0] if squeeze else grad)


# ---------------------------------------------------------------------------
# zones
# ---------------------------------------------------------------------------

def _pixel_grid(model: CameraModel):
    ys, xs = np.mgrid[0:model.height, 0:model.width]
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1).astype(np.float64)


def default_zones(model: CameraModel, band: float = 0.25, c_low: float = 0.75) -> dict:
    """A: bottom band inside the image circle, B: top-centre band, C: outer polar annulus."""
    rays, valid = unproject_pixels(model, _pixel_grid(model))
    theta = np.arccos(np.clip(rays[:, 2], -1.0, 1.0)).reshape(model.height, model.width)
    circle = valid.reshape(model.height, model.width)

    rows = max(1, int(round(band * model.height)))
    a = np.zeros_like(circle)
    a[model.height - rows:, :] = True
    b = np.zeros_like(circle)
    c0, c1 = int(round(0.25 * model.width)), int(round(0.75 * model.width))
    b[:rows, c0:c1] = True
    c = circle & (theta >= c_low * model.theta_max) & (theta <= model.theta_max)
    return {"A": a & circle, "B": b & circle, "C": c}


def zone_metrics(a, b, zones: dict) -> dict:
    a, b = _check_pair(a, b)
    smap = ssim_map(a, b)
    inner = interior_mask(smap.shape)
    out = {}
    for name, mask in zones.items():
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape[:2]:
            raise ValueError(f"zone '{name}' mask shape {mask.shape} does not match image {a.shape[:2]}")
        if not np.any(mask):
            raise ValueError(f"zone '{name}' is empty")
        ssim_region = mask & inner if np.any(mask & inner) else mask
        out[name] = {"psnr": psnr(a[mask], b[mask]), "ssim": float(np.mean(smap[ssim_region])),
                     "pixels": int(np.count_nonzero(mask))}
    return out


# ---------------------------------------------------------------------------
# remapping
# ---------------------------------------------------------------------------

def _remap(image, map_x, map_y, fill):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[2] > 4:
        return np.stack([_remap(image[:, :, c], map_x, map_y, fill) for c in range(image.shape[2])], axis=2)
    return cv2.remap(image, map_x, map_y, interpolation=cv2.INTER_LINEAR,
                     borderMode=cv2.BORDER_CONSTANT, borderValue=fill)


def _resample(image, source: CameraModel, target: CameraModel, fill: float):
    """Sample ``image`` (taken with ``source``) on the pixel grid of ``target``."""
    image = np.asarray(image, dtype=np.float64)
    rays, ok = unproject_pixels(target, _pixel_grid(target))
    pixels, in_view = project_points_masked(source, rays)
    ok &= in_view
    px = np.where(ok, pixels[:, 0], -1.0)
    py = np.where(ok, pixels[:, 1], -1.0)
    ok &= (px >= 0.0) & (px <= source.width - 1) & (py >= 0.0) & (py <= source.height - 1)

    shape = (target.height, target.width)
    map_x = np.where(ok, px, -1.0).reshape(shape).astype(np.float32)
    map_y = np.where(ok, py, -1.0).reshape(shape).astype(np.float32)
    out = _remap(image, map_x, map_y, fill)
    valid = ok.reshape(shape)
    out[~valid] = fill
    return out, valid


def redistort_image(pinhole_image, pinhole: CameraModel, fisheye: CameraModel, fill: float = 0.0):
    """Pinhole render -> fisheye image; returns (image, validity mask)."""
    return _resample(pinhole_image, pinhole, fisheye, fill)


def undistort_image(fisheye_image, fisheye: CameraModel, pinhole: CameraModel, fill: float = 0.0):
    """Fisheye image -> pinhole rectification; returns (image, validity mask)."""
    return _resample(fisheye_image, fisheye, pinhole, fill)


def reference_pinhole(fisheye: CameraModel, max_deg: float = 70.0) -> CameraModel:
    """
    Pinhole camera sharing the fisheye focal and principal point, padded by
    whole pixels so its grid contains the fisheye grid and reaches max_deg.
    """
    reach_x = fisheye.fx * math.tan(math.radians(max_deg))
    reach_y = fisheye.fy * math.tan(math.radians(max_deg))
    pad_x = max(0, int(math.ceil(reach_x - min(fisheye.u0, fisheye.width - 1 - fisheye.u0))))
    pad_y = max(0, int(math.ceil(reach_y - min(fisheye.v0, fisheye.height - 1 - fisheye.v0))))
    return CameraModel(
        kind=CameraKind.PINHOLE, width=fisheye.width + 2 * pad_x, height=fisheye.height + 2 * pad_y,
        u0=fisheye.u0 + pad_x, v0=fisheye.v0 + pad_y, fx=fisheye.fx, fy=fisheye.fy,
        camera_id=f"{fisheye.camera_id}_reference",
    )


# ---------------------------------------------------------------------------
# error analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnalysisConfig:
    stretch_tangential: bool
    stretch_polar: bool
    order: int = 1

    @property
    def label(self) -> str:
        phi = "1" if self.stretch_tangential else "x"
        theta = str(self.order) if self.stretch_polar else "x"
        return f"phi={phi},theta={theta}"

    def warp_options(self) -> WarpOptions:
        return WarpOptions(self.stretch_tangential, self.stretch_polar, self.order)


DEFAULT_GRID = (
    AnalysisConfig(False, False, 1),
    AnalysisConfig(False, True, 1),
    AnalysisConfig(True, False, 1),
    AnalysisConfig(True, True, 1),
    AnalysisConfig(True, True, 2),
)


@dataclass
class ReportRow:
    label: str
    stretch_tangential: bool
    stretch_polar: bool
    order: int
    psnr: float
    ssim: float
    wall_ms: Optional[float] = None

    def to_dict(self) -> dict:
        row = asdict(self)
        if row["wall_ms"] is None:
            del row["wall_ms"]
        return row


@dataclass
class ErrorAnalysisReport:
    camera_id: str
    poses: int
    roi_pixels: int
    rows: list = field(default_factory=list)

    def row(self, label: str) -> ReportRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {"camera_id": self.camera_id, "poses": self.poses, "roi_pixels": self.roi_pixels,
                "rows": [r.to_dict() for r in self.rows]}


def run_error_analysis(gaussians, poses, fisheye: CameraModel, grid=DEFAULT_GRID,
                       options: RenderOptions = RenderOptions(), reference_max_deg: float = 70.0,
                       fill: float = 0.0, record_wall_time: bool = False) -> ErrorAnalysisReport:
    """
    Compare convert-project renders (Gaussians warped per configuration)
    against project-convert references (pinhole render, then redistorted),
    on the reference's validity mask.

    Render times are recorded only with record_wall_time.
    """
    pinhole = reference_pinhole(fisheye, reference_max_deg)
    references = []
    for pose in poses:
        ref = render(gaussians, pose, pinhole, options)
        img, roi = redistort_image(ref.color, pinhole, fisheye, fill)
        references.append((img, roi))
    roi_pixels = int(sum(np.count_nonzero(roi) for _, roi in references))
    logger.info(f"Error analysis on {len(poses)} poses, ROI {roi_pixels} px, reference {pinhole.width}x{pinhole.height}")

    report = ErrorAnalysisReport(fisheye.camera_id, len(poses), roi_pixels)
    for cfg in grid:
        run_opts = RenderOptions(cfg.warp_options(), options.background, options.threads,
                                 options.near, options.sh_degree)
        psnrs, ssims, times = [], [], []
        for pose, (ref_img, roi) in zip(poses, references):
            start = time.perf_counter()
            out = render(gaussians, pose, fisheye, run_opts)
            times.append((time.perf_counter() - start) * 1000.0)
            psnrs.append(psnr(out.color[roi], ref_img[roi]))
            smap = ssim_map(out.color, ref_img)
            region = roi & interior_mask(roi.shape)
            ssims.append(float(np.mean(smap[region if np.any(region) else roi])))
        row = ReportRow(cfg.label, cfg.stretch_tangential, cfg.stretch_polar, cfg.order,
                        float(np.mean(psnrs)), float(np.mean(ssims)))
        if record_wall_time:
            row.wall_ms = float(np.mean(times))
        report.rows.append(row)
        logger.info(f"{row.label}: PSNR {row.psnr:.3f} dB, SSIM {row.ssim:.4f}, {float(np.mean(times)):.1f} ms")
    return report


REPORT_COLUMNS = ("label", "stretch_tangential", "stretch_polar", "order", "psnr", "ssim", "wall_ms")


def write_report_csv(report: ErrorAnalysisReport, path) -> None:
    os.makedirs(os.path.dirname(str(path)) or ".", exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        columns = [c for c in REPORT_COLUMNS if c != "wall_ms" or any(r.wall_ms is not None for r in report.rows)]
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in report.rows:
            writer.writerow(row.to_dict())


def write_report_json(report: ErrorAnalysisReport, path) -> None:
    save_json(report.to_dict(), path)

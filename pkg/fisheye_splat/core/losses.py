# ============================================
# core/losses.py
# ============================================
"""
Training loss terms. Every ``*_and_grad`` function returns the scalar value
and its gradient with respect to the rendered quantity.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from fisheye_splat.core.camera_models import CameraModel
from fisheye_splat.core.evaluation import ssim_with_grad
from fisheye_splat.core.gaussian_core import GaussianSet
from fisheye_splat.core.log_utils import get_logger

logger = get_logger(__name__)

IGNORE_LABEL = 255


@dataclass
class LossBreakdown:
    rgb_pinhole: float = 0.0
    rgb_fisheye: float = 0.0
    depth: float = 0.0
    semantic: float = 0.0
    normal: float = 0.0
    reg: float = 0.0
    lidar: Optional[float] = None

    @property
    def total(self) -> float:
        return sum(self.terms().values())

    def terms(self) -> dict:
        out = {"rgb_pinhole": self.rgb_pinhole, "rgb_fisheye": self.rgb_fisheye, "depth": self.depth,
               "semantic": self.semantic, "normal": self.normal, "reg": self.reg}
        if self.lidar is not None:
            out["lidar"] = self.lidar
        return out


# ---------------------------------------------------------------------------
# image
# ---------------------------------------------------------------------------

def image_loss_and_grad(render, target, lambda_rgb: float = 0.2):
    """(1 - lambda) L1 + lambda (1 - SSIM) / 2."""
    render = np.asarray(render, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if render.shape != target.shape:
        raise ValueError(f"render {render.shape} and target {target.shape} differ in shape")
    diff = render - target
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lambda_rgb) * np.sign(diff) / diff.size
    value = (1.0 - lambda_rgb) * l1
    if lambda_rgb > 0.0:
        s, g_s = ssim_with_grad(render, target)
        value += lambda_rgb * 0.5 * (1.0 - s)
        grad = grad - 0.5 * lambda_rgb * g_s
    return value, grad


def compute_image_loss(render, target, lambda_rgb: float = 0.2) -> float:
    return image_loss_and_grad(render, target, lambda_rgb)[0]


# ---------------------------------------------------------------------------
# depth
# ---------------------------------------------------------------------------

def pearson_and_grad(x, y):
    """Sample correlation of two vectors and its gradient w.r.t. x; 0 when either has no variance."""
    xc = x - x.mean()
    yc = y - y.mean()
    nx = float(np.sqrt(np.sum(xc * xc)))
    ny = float(np.sqrt(np.sum(yc * yc)))
    if nx == 0.0 or ny == 0.0:
        return 0.0, np.zeros_like(x)
    rho = float(np.sum(xc * yc)) / (nx * ny)
    return rho, yc / (nx * ny) - rho * xc / (nx * nx)


def depth_loss_and_grad(render_depth, lidar_depth=None, lidar_mask=None, mono_depth=None, mono_mask=None):
    """LiDAR L1 on the masked pixels plus the Pearson term 1 - corr against monocular depth."""
    render_depth = np.asarray(render_depth, dtype=np.float64)
    grad = np.zeros_like(render_depth)
    value = 0.0

    if lidar_depth is not None:
        lidar_depth = np.asarray(lidar_depth, dtype=np.float64)
        mask = lidar_depth > 0.0 if lidar_mask is None else np.asarray(lidar_mask, dtype=bool)
        count = int(np.count_nonzero(mask))
        if count == 0:
            logger.warning("⚠️ LiDAR depth mask has no pixels, LiDAR depth term set to 0")
        else:
            diff = render_depth[mask] - lidar_depth[mask]
            value += float(np.mean(np.abs(diff)))
            grad[mask] += np.sign(diff) / count

    if mono_depth is not None:
        mono_depth = np.asarray(mono_depth, dtype=np.float64)
        mask = np.isfinite(mono_depth) if mono_mask is None else np.asarray(mono_mask, dtype=bool)
        if np.count_nonzero(mask) < 2:
            logger.warning("⚠️ monocular depth has fewer than 2 valid pixels, Pearson term set to 0")
        else:
            rho, g_rho = pearson_and_grad(render_depth[mask], mono_depth[mask])
            value += 1.0 - rho
            grad[mask] -= g_rho
    return value, grad


def compute_depth_loss(render_depth, lidar_depth=None, lidar_mask=None, mono_depth=None, mono_mask=None) -> float:
    return depth_loss_and_grad(render_depth, lidar_depth, lidar_mask, mono_depth, mono_mask)[0]


# ---------------------------------------------------------------------------
# semantics
# ---------------------------------------------------------------------------

def semantic_loss_and_grad(logits, labels, weight: float = 0.01):
    """weight * mean cross-entropy of the blended logits; label 255 is ignored."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    grad = np.zeros_like(logits)
    num_classes = logits.shape[-1]
    valid = (labels != IGNORE_LABEL) & (labels >= 0) & (labels < num_classes)
    count = int(np.count_nonzero(valid))
    if num_classes == 0 or count == 0:
        return 0.0, grad

    z = logits[valid]
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(z), axis=1))
    idx = labels[valid].astype(np.int64)
    rows = np.arange(count)
    nll = log_norm - z[rows, idx]
    probs = np.exp(z - log_norm[:, None])
    probs[rows, idx] -= 1.0
    grad[valid] = weight * probs / count
    return weight * float(np.mean(nll)), grad


def compute_semantic_loss(logits, labels, weight: float = 0.01) -> float:
    return semantic_loss_and_grad(logits, labels, weight)[0]


# ---------------------------------------------------------------------------
# normals
# ---------------------------------------------------------------------------

def depth_to_points(depth, model: CameraModel) -> np.ndarray:
    """Camera-frame points from a z-depth plane through pinhole intrinsics."""
    model = model.pinhole_equivalent()
    h, w = depth.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    mx = (xs - model.u0) / model.fx
    my = (ys - model.v0) / model.fy
    return np.stack([mx * depth, my * depth, depth], axis=2)


def depth_to_normals(depth, model: CameraModel):
    """
    Camera-facing unit normals from central-difference tangents of the
    unprojected depth; returns (normals[H,W,3], valid[H,W]). Border pixels
    and pixels next to non-positive depth are invalid.
    """
    depth = np.asarray(depth, dtype=np.float64)
    points = depth_to_points(depth, model)
    normals = np.zeros_like(points)
    valid = np.zeros(depth.shape, dtype=bool)
    if depth.shape[0] < 3 or depth.shape[1] < 3:
        return normals, valid

    tx = points[1:-1, 2:] - points[1:-1, :-2]
    ty = points[2:, 1:-1] - points[:-2, 1:-1]
    n = np.cross(ty, tx)
    norm = np.linalg.norm(n, axis=2)
    pos = depth > 0.0
    ok = (norm > 0.0) & pos[1:-1, 1:-1] & pos[1:-1, 2:] & pos[1:-1, :-2] & pos[2:, 1:-1] & pos[:-2, 1:-1]
    normals[1:-1, 1:-1] = np.where(ok[:, :, None], n / np.where(norm > 0.0, norm, 1.0)[:, :, None], 0.0)
    valid[1:-1, 1:-1] = ok
    return normals, valid


def normal_loss_and_grad(render_normal, depth_normal, valid=None):
    """mean |1 - N_p . N_d| over valid pixels; N_d is held constant."""
    render_normal = np.asarray(render_normal, dtype=np.float64)
    depth_normal = np.asarray(depth_normal, dtype=np.float64)
    grad = np.zeros_like(render_normal)
    mask = np.ones(render_normal.shape[:2], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    count = int(np.count_nonzero(mask))
    if count == 0:
        return 0.0, grad
    r = 1.0 - np.sum(render_normal[mask] * depth_normal[mask], axis=1)
    grad[mask] = -np.sign(r)[:, None] * depth_normal[mask] / count
    return float(np.mean(np.abs(r))), grad


def compute_normal_loss(render_normal, depth_normal, valid=None) -> float:
    return normal_loss_and_grad(render_normal, depth_normal, valid)[0]


# ---------------------------------------------------------------------------
# regularization
# ---------------------------------------------------------------------------

def reg_loss_and_grad(gaussians: GaussianSet, weight: float = 0.01):
    """weight * (mean opacity + mean scale), with gradients in parameter space."""
    n = len(gaussians)
    if n == 0:
        raise ValueError("regularization loss of an empty Gaussian set")
    opacity = gaussians.opacities
    scales = gaussians.scales
    value = weight * (float(np.mean(opacity)) + float(np.mean(scales)))
    grad = gaussians.zeros_like()
    grad.opacity_logits = weight / n * opacity * (1.0 - opacity)
    grad.log_scales = weight / scales.size * scales
    return value, grad


def compute_reg_loss(gaussians: GaussianSet, weight: float = 0.01) -> float:
    return reg_loss_and_grad(gaussians, weight)[0]

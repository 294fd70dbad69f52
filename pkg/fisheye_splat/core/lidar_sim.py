# ============================================
# core/lidar_sim.py
# ============================================
"""
LiDAR simulation from eight pinhole pseudo cameras around the sensor.

Sensor frame: x forward, y left, z up. A sensor pose is (origin, R) with R
mapping sensor directions to world directions.
"""
import math
import os
from dataclasses import dataclass, field

import numpy as np

from fisheye_splat.core.camera_models import CameraKind, CameraModel, CameraPose, project_points_masked
from fisheye_splat.core.config import LidarConfig
from fisheye_splat.core.errors import SchemaError
from fisheye_splat.core.gaussian_core import GaussianSet
from fisheye_splat.core.log_utils import get_logger
from fisheye_splat.core.ply_io import write_point_cloud
from fisheye_splat.core.rasterizer import RenderGrads, RenderOptions, render, render_backward
from fisheye_splat.core.scene_graph import SceneModel, assemble_frame
from fisheye_splat.core.utils import bilinear_sample, bilinear_sample_vjp, load_json, save_json

logger = get_logger(__name__)

YAWS_DEG = (0.0, 90.0, 180.0, 270.0)
UNIT_TOL = 1e-6


@dataclass
class LidarScanPattern:
    rays: np.ndarray

    def __post_init__(self):
        self.rays = np.asarray(self.rays, dtype=np.float64).reshape(-1, 3)
        norms = np.linalg.norm(self.rays, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ValueError("scan pattern rays must be unit vectors")

    def __len__(self):
        return len(self.rays)

    @classmethod
    def from_grid(cls, azimuth_deg, elevation_deg) -> "LidarScanPattern":
        az = np.radians(np.asarray(azimuth_deg, dtype=np.float64))
        el = np.radians(np.asarray(elevation_deg, dtype=np.float64))
        A, E = np.meshgrid(az, el, indexing="ij")
        rays = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
        return cls(rays.reshape(-1, 3))

    @classmethod
    def from_points(cls, points, origin, R) -> "LidarScanPattern":
        """Ray directions (sensor frame) of a recorded scan, in point order."""
        d = np.asarray(points, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return cls(d @ np.asarray(R, dtype=np.float64))


def load_scan_pattern(path) -> LidarScanPattern:
    """JSON {azimuth: {start, stop, step}, elevations: [...]} in degrees, or {rays: [[x, y, z], ...]}."""
    data = load_json(path)
    if not isinstance(data, dict):
        raise SchemaError(f"{path}: scan pattern must be an object")
    if "rays" in data:
        rays = np.asarray(data["rays"], dtype=np.float64)
        if rays.ndim != 2 or rays.shape[1] != 3:
            raise SchemaError(f"{path}: field 'rays' must be a list of 3-vectors")
        return LidarScanPattern(rays / np.linalg.norm(rays, axis=1, keepdims=True))
    for key in ("azimuth", "elevations"):
        if key not in data:
            raise SchemaError(f"{path}: missing field '{key}'")
    az = data["azimuth"]
    if not isinstance(az, dict) or not {"start", "stop", "step"} <= set(az):
        raise SchemaError(f"{path}: field 'azimuth' needs 'start', 'stop' and 'step'")
    if az["step"] <= 0:
        raise SchemaError(f"{path}: field 'azimuth.step' must be > 0")
    return LidarScanPattern.from_grid(np.arange(az["start"], az["stop"], az["step"]), data["elevations"])


# ---------------------------------------------------------------------------
# pseudo camera rig
# ---------------------------------------------------------------------------

def _camera_rows(forward):
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


def build_pseudo_rig(origin, R, fov_deg: float = 100.0, resolution: int = 256, pitch_deg: float = 45.0) -> list:
    """Eight (CameraModel, CameraPose) pairs: four level yaws and the same four pitched down."""
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    R = np.asarray(R, dtype=np.float64).reshape(3, 3)
    focal = 0.5 * resolution / math.tan(math.radians(fov_deg) / 2.0)
    centre = 0.5 * (resolution - 1)
    rig = []
    for pitch in (0.0, -pitch_deg):
        for yaw in YAWS_DEG:
            p, y = math.radians(pitch), math.radians(yaw)
            forward = np.array([math.cos(p) * math.cos(y), math.cos(p) * math.sin(y), math.sin(p)])
            R_wc = _camera_rows(forward) @ R.T
            model = CameraModel(
                kind=CameraKind.PINHOLE, width=resolution, height=resolution, u0=centre, v0=centre,
                fx=focal, fy=focal, camera_id=f"lidar_yaw{int(yaw)}_pitch{int(pitch)}",
            )
            rig.append((model, CameraPose(R_wc, -R_wc @ origin)))
    return rig


def assign_rays(rig, rays_world):
    """Camera index (or -1) and pixel for each world-frame ray: best-aligned camera that sees it."""
    n = len(rays_world)
    axes = np.stack([pose.axis for _, pose in rig])
    order = np.argsort(-(rays_world @ axes.T), axis=1, kind="stable")
    cam_index = np.full(n, -1, dtype=np.int64)
    pixels = np.zeros((n, 2))
    for rank in range(len(rig)):
        pending = cam_index < 0
        if not np.any(pending):
            break
        for c, (model, pose) in enumerate(rig):
            sel = pending & (order[:, rank] == c)
            if not np.any(sel):
                continue
            px, ok = project_points_masked(model, rays_world[sel] @ pose.R_wc.T)
            ok &= (px[:, 0] >= 0.0) & (px[:, 0] <= model.width - 1) & (px[:, 1] >= 0.0) & (px[:, 1] <= model.height - 1)
            idx = np.nonzero(sel)[0][ok]
            cam_index[idx] = c
            pixels[idx] = px[ok]
    return cam_index, pixels


# ---------------------------------------------------------------------------
# scan simulation
# ---------------------------------------------------------------------------

@dataclass
class ScanResult:
    points: np.ndarray
    intensity: np.ndarray
    ray_index: np.ndarray
    camera_index: np.ndarray
    pixels: np.ndarray
    dropped_outside: int
    dropped_alpha: int
    rig: list = field(repr=False, default_factory=list)
    renders: list = field(repr=False, default_factory=list)
    _ctx: dict = field(repr=False, default_factory=dict)


def simulate_scan(scene, pattern: LidarScanPattern, origin, R, timestamp: float = 0.0,
                  config: LidarConfig = LidarConfig(), options: RenderOptions = RenderOptions()) -> ScanResult:
    """
    Per ray: pick the pseudo camera best aligned with it, bilinearly sample
    its alpha-normalized depth and intensity, and convert z-depth to range.
    """
    gaussians = assemble_frame(scene, timestamp).gaussians if isinstance(scene, SceneModel) else scene
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    R = np.asarray(R, dtype=np.float64).reshape(3, 3)
    rig = build_pseudo_rig(origin, R, config.fov_deg, config.resolution, config.pitch_deg)
    rays_world = pattern.rays @ R.T
    cam_index, pixels = assign_rays(rig, rays_world)

    outside = int(np.count_nonzero(cam_index < 0))
    if outside:
        logger.warning(f"⚠️ {outside} rays fall outside every pseudo camera and were dropped")

    renders = [render(gaussians, pose, model, options) for model, pose in rig]

    n = len(pattern)
    depth = np.zeros(n)
    alpha = np.zeros(n)
    inten = np.zeros(n)
    cos = np.ones(n)
    for c, (model, pose) in enumerate(rig):
        sel = np.nonzero(cam_index == c)[0]
        if sel.size == 0:
            continue
        xy = pixels[sel]
        depth[sel] = bilinear_sample(renders[c].depth, xy)
        alpha[sel] = bilinear_sample(renders[c].alpha, xy)
        inten[sel] = bilinear_sample(renders[c].intensity, xy)
        cos[sel] = rays_world[sel] @ pose.axis

    # empty pixels carry alpha == 0 exactly and have no depth to normalize
    hit = (cam_index >= 0) & (alpha >= config.alpha_threshold) & (alpha > 0.0)
    dropped_alpha = int(np.count_nonzero((cam_index >= 0) & ~hit))
    keep = np.nonzero(hit)[0]
    z = depth[keep] / alpha[keep]
    ranges = z / cos[keep]
    points = origin + rays_world[keep] * ranges[:, None]
    logger.info(f"Simulated {len(keep)}/{n} LiDAR returns ({dropped_alpha} without surface)")

    return ScanResult(
        points=points, intensity=inten[keep] / alpha[keep], ray_index=keep,
        camera_index=cam_index[keep], pixels=pixels[keep], dropped_outside=outside,
        dropped_alpha=dropped_alpha, rig=rig, renders=renders,
        _ctx={"depth": depth[keep], "alpha": alpha[keep], "cos": cos[keep],
              "rays": rays_world[keep], "intensity": inten[keep]},
    )


def lidar_loss_and_grad(sim_points, gt_points, sim_intensity, gt_intensity, weight: float = 0.1):
    """weight * (mean |x_sim - x_gt| + mean |I_sim - I_gt|); returns (value, grad_points, grad_intensity)."""
    sim_points = np.asarray(sim_points, dtype=np.float64)
    diff = sim_points - np.asarray(gt_points, dtype=np.float64)
    n = len(sim_points)
    if n == 0:
        return 0.0, np.zeros((0, 3)), np.zeros(0)
    dist = np.linalg.norm(diff, axis=1)
    di = np.asarray(sim_intensity, dtype=np.float64) - np.asarray(gt_intensity, dtype=np.float64)
    value = weight * (float(np.mean(dist)) + float(np.mean(np.abs(di))))
    g_points = weight / n * diff / np.where(dist > 0.0, dist, 1.0)[:, None]
    g_points[dist == 0.0] = 0.0
    return value, g_points, weight / n * np.sign(di)


def compute_lidar_loss(sim_points, gt_points, sim_intensity, gt_intensity, weight: float = 0.1) -> float:
    return lidar_loss_and_grad(sim_points, gt_points, sim_intensity, gt_intensity, weight)[0]


def lidar_loss_for_scan(scan: ScanResult, gt_points, gt_intensity, weight: float = 0.1):
    """Loss against a recorded scan whose arrays are indexed by ray."""
    gt_points = np.asarray(gt_points, dtype=np.float64)[scan.ray_index]
    gt_intensity = np.zeros(len(scan.ray_index)) if gt_intensity is None \
        else np.asarray(gt_intensity, dtype=np.float64)[scan.ray_index]
    return lidar_loss_and_grad(scan.points, gt_points, scan.intensity, gt_intensity, weight)


def simulate_scan_vjp(scan: ScanResult, grad_points, grad_intensity) -> GaussianSet:
    """Chain point/intensity gradients into the pseudo-camera planes and through the rasterizer."""
    ctx = scan._ctx
    alpha, depth, cos = ctx["alpha"], ctx["depth"], ctx["cos"]
    g_range = np.sum(np.asarray(grad_points) * ctx["rays"], axis=1)
    g_z = g_range / cos
    g_i = np.asarray(grad_intensity, dtype=np.float64)
    g_depth = g_z / alpha
    g_inten = g_i / alpha
    g_alpha = -(g_z * depth + g_i * ctx["intensity"]) / (alpha * alpha)

    total = None
    for c, (model, _) in enumerate(scan.rig):
        sel = scan.camera_index == c
        if not np.any(sel):
            continue
        shape = (model.height, model.width)
        xy = scan.pixels[sel]
        grads = RenderGrads(
            depth=bilinear_sample_vjp(shape, xy, g_depth[sel]),
            intensity=bilinear_sample_vjp(shape, xy, g_inten[sel]),
            alpha=bilinear_sample_vjp(shape, xy, g_alpha[sel]),
        )
        part = render_backward(scan.renders[c], grads)
        total = part if total is None else total.add_(part)
    if total is None:
        total = scan.renders[0]._ctx["gaussians"].zeros_like()
    return total


def write_scan(directory, scan: ScanResult) -> None:
    directory = str(directory)
    os.makedirs(directory, exist_ok=True)
    write_point_cloud(os.path.join(directory, "scan.ply"), scan.points, intensity=scan.intensity)
    save_json({
        "returns": int(len(scan.points)),
        "dropped_outside": scan.dropped_outside,
        "dropped_no_surface": scan.dropped_alpha,
        "cameras": [m.camera_id for m, _ in scan.rig],
    }, os.path.join(directory, "scan.json"))

# ============================================
# core/synthetic.py
# ============================================
"""
Synthetic scenes, camera rigs and on-disk datasets rendered from a hidden
reference scene. Used by the test-suite and desk-scale runs.
"""
import os

import numpy as np

from fisheye_splat.core.camera_models import CameraKind, CameraModel, CameraPose, save_cameras
from fisheye_splat.core.fisheye_warp import warped_depth_scale
from fisheye_splat.core.gaussian_core import SH_C0, SH_COEFFS, GaussianSet, logit, quat_normalize, rgb_to_sh_dc
from fisheye_splat.core.log_utils import get_logger
from fisheye_splat.core.ply_io import write_point_cloud
from fisheye_splat.core.rasterizer import RenderOptions, render
from fisheye_splat.core.scene_graph import Appearance, SceneModel
from fisheye_splat.core.utils import save_json, write_image_rgb, write_label_png, write_plane

logger = get_logger(__name__)


def random_gaussians(n: int, rng, center=(0.0, 0.0, 0.0), spread=1.0, scale_range=(0.02, 0.15),
                     opacity_range=(0.5, 0.95), num_classes: int = 0, sh_noise: float = 0.1) -> GaussianSet:
    """Anisotropic Gaussians with random colours uniformly spread in a cube."""
    spread = np.broadcast_to(np.asarray(spread, dtype=np.float64), (3,))
    means = np.asarray(center, dtype=np.float64) + rng.uniform(-1.0, 1.0, (n, 3)) * spread
    rotations = quat_normalize(rng.normal(size=(n, 4)))
    log_scales = np.log(rng.uniform(scale_range[0], scale_range[1], (n, 3)))
    sh = rng.normal(scale=sh_noise, size=(n, SH_COEFFS, 3))
    sh[:, 0, :] = rgb_to_sh_dc(rng.uniform(0.1, 0.9, (n, 3)))
    return GaussianSet(
        means=means, rotations=rotations, log_scales=log_scales,
        opacity_logits=logit(rng.uniform(opacity_range[0], opacity_range[1], n)), sh=sh,
        semantic_logits=rng.normal(scale=2.0, size=(n, num_classes)),
        intensity_logits=rng.normal(size=n),
    )


def wall_plane(distance: float = 10.0, half_size: float = 12.0, spacing: float = 0.25,
               thickness: float = 0.01, opacity: float = 0.99, intensity: float = 0.0) -> GaussianSet:
    """Dense flat wall of Gaussians at x = distance (world x forward)."""
    ticks = np.arange(-half_size, half_size + 1e-9, spacing)
    Y, Z = np.meshgrid(ticks, ticks, indexing="ij")
    n = Y.size
    means = np.stack([np.full(n, distance), Y.reshape(-1), Z.reshape(-1)], axis=1)
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    log_scales = np.log(np.tile([thickness, spacing, spacing], (n, 1)))
    sh = np.zeros((n, SH_COEFFS, 3))
    sh[:, 0, :] = rgb_to_sh_dc(0.5)
    return GaussianSet(
        means=means, rotations=rotations, log_scales=log_scales,
        opacity_logits=np.full(n, float(logit(opacity))), sh=sh,
        semantic_logits=np.zeros((n, 0)), intensity_logits=np.full(n, intensity),
    )


def pinhole_camera(width: int, height: int, fov_deg: float = 60.0, camera_id: str = "pinhole") -> CameraModel:
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
    return CameraModel(kind=CameraKind.PINHOLE, width=width, height=height, u0=0.5 * (width - 1),
                       v0=0.5 * (height - 1), fx=f, fy=f, camera_id=camera_id)


def mei_camera(width: int, height: int, xi: float = 1.0, gamma_ratio: float = 0.7,
               camera_id: str = "fisheye") -> CameraModel:
    gamma = gamma_ratio * width
    return CameraModel(kind=CameraKind.MEI, width=width, height=height, u0=0.5 * (width - 1),
                       v0=0.5 * (height - 1), gamma1=gamma, gamma2=gamma, xi=xi, camera_id=camera_id)


def ring_poses(n: int, radius: float = 4.0, height: float = 0.5, target=(0.0, 0.0, 0.0), phase: float = 0.0) -> list:
    """Cameras on a horizontal circle looking at ``target``."""
    poses = []
    for i in range(n):
        a = phase + 2.0 * np.pi * i / max(n, 1)
        centre = np.asarray(target) + np.array([radius * np.cos(a), radius * np.sin(a), height])
        poses.append(CameraPose.look_at(centre, target))
    return poses


def make_synthetic_dataset(root, n_gaussians: int = 300, views_per_camera: int = 2, resolution: int = 64,
                           num_classes: int = 3, seed: int = 0, with_lidar: bool = True) -> SceneModel:
    """
    Render a hidden reference scene with one pinhole and one MEI fisheye
    camera into the dataset layout under ``root``; returns the hidden scene.
    """
    root = str(root)
    rng = np.random.default_rng(seed)
    hidden = random_gaussians(n_gaussians, rng, spread=1.0, num_classes=num_classes)
    scene = SceneModel(hidden, GaussianSet.empty(0, num_classes), [], {}, [f"class_{i}" for i in range(num_classes)])

    cameras = [
        (pinhole_camera(resolution, resolution, 60.0, "cam_pinhole"), None),
        (mei_camera(resolution, resolution, 1.0, 0.7, "cam_fisheye"), None),
    ]
    options = RenderOptions()
    frames = []
    for c, (model, _) in enumerate(cameras):
        scene.appearance[model.camera_id] = Appearance()
        poses = ring_poses(views_per_camera, radius=4.0, height=0.5, phase=0.3 * c)
        cameras[c] = (model, poses[0])
        for v, pose in enumerate(poses):
            out = render(hidden, pose, model, options)
            name = f"{model.camera_id}_{v:03d}"
            entry = {"camera_id": model.camera_id, "timestamp": float(v), "image": f"images/{name}.png",
                     "pose": pose.to_json()}
            write_image_rgb(os.path.join(root, entry["image"]), out.color)

            depth = np.where(out.alpha > 0.5, out.depth / np.maximum(out.alpha, 1e-12), 0.0) * warped_depth_scale(model)
            entry["depth"] = f"depth/{name}.f32"
            write_plane(os.path.join(root, entry["depth"]), depth, ["depth"])
            if with_lidar:
                # every 4th row, like a sparse scanner projected into the image
                lidar = np.zeros_like(depth)
                lidar[::4] = depth[::4]
                entry["lidar_mask"] = f"lidar/{name}.f32"
                write_plane(os.path.join(root, entry["lidar_mask"]), lidar, ["lidar_depth"])
            if num_classes:
                labels = np.argmax(out.semantic, axis=2).astype(np.uint8)
                labels[out.alpha < 0.5] = 255
                entry["semantic"] = f"semantic/{name}.png"
                write_label_png(os.path.join(root, entry["semantic"]), labels)
            frames.append(entry)

    save_cameras(os.path.join(root, "cameras.json"), cameras)
    save_json(frames, os.path.join(root, "frames.json"))
    save_json(scene.class_names, os.path.join(root, "classes.json"))
    rgb = np.clip(0.5 + SH_C0 * hidden.sh[:, 0, :], 0.0, 1.0)
    write_point_cloud(os.path.join(root, "points.ply"), hidden.means + rng.normal(scale=0.02, size=hidden.means.shape),
                      colors=rgb)
    logger.info(f"✅ Wrote synthetic dataset to {root}: {len(cameras)} cameras, {len(frames)} frames")
    return scene

# ============================================
# core/training.py
# ============================================
"""
Joint optimization of a composite scene from pinhole and fisheye frames:
loss assembly, backward pass, Adam steps and opacity-preserving relocation.
"""
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from fisheye_splat.core.config import RunConfig, TrainConfig
from fisheye_splat.core.errors import TrainingDivergedError
from fisheye_splat.core.evaluation import psnr, ssim
from fisheye_splat.core.fisheye_warp import warped_depth_scale
from fisheye_splat.core.gaussian_core import GaussianSet, logit
from fisheye_splat.core.lidar_sim import LidarScanPattern, lidar_loss_for_scan, simulate_scan, simulate_scan_vjp
from fisheye_splat.core.log_utils import get_logger
from fisheye_splat.core.losses import (
    LossBreakdown,
    depth_loss_and_grad,
    depth_to_normals,
    image_loss_and_grad,
    normal_loss_and_grad,
    reg_loss_and_grad,
    semantic_loss_and_grad,
)
from fisheye_splat.core.optimizer import AdamOptimizer
from fisheye_splat.core.rasterizer import RenderGrads, RenderOptions, render, render_backward
from fisheye_splat.core.scene_graph import (
    Appearance,
    Dataset,
    SceneModel,
    apply_appearance,
    apply_appearance_vjp,
    assemble_frame,
    init_dynamic_object,
    init_from_points,
    init_sky,
)

logger = get_logger(__name__)

APPEARANCE_MIN_SCALE = 1e-3
ALPHA_SURFACE = 0.5


# ---------------------------------------------------------------------------
# density control
# ---------------------------------------------------------------------------

def density_scheduled(iteration: int, config: TrainConfig) -> bool:
    if iteration < config.densify_from or iteration % config.densify_interval != 0:
        return False
    return config.densify_until == 0 or iteration <= config.densify_until


def density_control_step(gaussians: GaussianSet, iteration: int, rng, config: TrainConfig = TrainConfig()):
    """
    Relocate near-transparent Gaussians onto live donors sampled in proportion
    to opacity. A donor with m clones and all of its clones share the opacity
    1 - (1 - o)^(1/(m+1)) and have their scales divided by sqrt(m+1).

    Returns (gaussians, relocated row indices); the count never changes.
    """
    none = np.zeros(0, dtype=np.int64)
    if not density_scheduled(iteration, config) or len(gaussians) == 0:
        return gaussians, none
    opacity = gaussians.opacities
    dead = np.nonzero(opacity < config.dead_opacity)[0]
    alive = np.nonzero(opacity >= config.dead_opacity)[0]
    if dead.size == 0:
        return gaussians, none
    if alive.size == 0:
        logger.warning(f"⚠️ iteration {iteration}: every Gaussian is below opacity {config.dead_opacity}, nothing to relocate onto")
        return gaussians, none

    weights = opacity[alive] / np.sum(opacity[alive])
    donors = rng.choice(alive, size=dead.size, p=weights)
    clones = np.bincount(donors, minlength=len(gaussians))

    out = gaussians.copy()
    used = np.nonzero(clones)[0]
    m = clones[used].astype(np.float64)
    shared = 1.0 - (1.0 - opacity[used]) ** (1.0 / (m + 1.0))
    out.opacity_logits[used] = logit(shared)
    out.log_scales[used] -= 0.5 * np.log(m + 1.0)[:, None]

    for name in ("means", "rotations", "log_scales", "opacity_logits", "sh", "semantic_logits", "intensity_logits"):
        getattr(out, name)[dead] = getattr(out, name)[donors]
    logger.debug(f"iteration {iteration}: relocated {dead.size} Gaussians onto {used.size} donors")
    return out, dead


# ---------------------------------------------------------------------------
# scene initialization
# ---------------------------------------------------------------------------

def camera_centres(dataset: Dataset) -> np.ndarray:
    return np.stack([f.pose.center for f in dataset.frames]) if dataset.frames else np.zeros((1, 3))


def scene_extent(dataset: Dataset) -> float:
    centres = camera_centres(dataset)
    radius = float(np.max(np.linalg.norm(centres - centres.mean(axis=0), axis=1)))
    return 1.1 * radius if radius > 0.0 else 1.0


def init_scene(dataset: Dataset, config: TrainConfig = TrainConfig()) -> SceneModel:
    num_classes = len(dataset.class_names)
    if dataset.points is None or len(dataset.points) == 0:
        raise ValueError(f"{dataset.root}: no initial points to build the background from")
    background = init_from_points(dataset.points, dataset.colors, num_classes=num_classes)
    if config.sky_gaussians:
        sky_class = dataset.class_names.index("sky") if "sky" in dataset.class_names else None
        sky = init_sky(config.sky_gaussians, camera_centres(dataset).mean(axis=0), config.sky_radius,
                       seed=config.seed, num_classes=num_classes, sky_class=sky_class)
    else:
        sky = GaussianSet.empty(0, num_classes)

    objects = []
    for i, (object_id, size, track) in enumerate(dataset.tracks):
        obj = init_dynamic_object(object_id, size, config.object_gaussians, seed=config.seed + 1 + i,
                                  num_classes=num_classes)
        obj.track = track
        objects.append(obj)
    appearance = {cid: Appearance() for cid in sorted(dataset.cameras)}
    return SceneModel(background, sky, objects, appearance, list(dataset.class_names))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    scene: SceneModel
    metrics: list = field(default_factory=list)
    losses: list = field(default_factory=list)


def round_robin(frames) -> list:
    """Frame order alternating across cameras (sorted ids), cycling within each camera."""
    by_camera = {}
    for i, f in enumerate(frames):
        by_camera.setdefault(f.camera_id, []).append(i)
    ids = sorted(by_camera)
    longest = max(len(v) for v in by_camera.values())
    order = []
    for k in range(longest):
        for cid in ids:
            idx = by_camera[cid]
            order.append(idx[k % len(idx)])
    return order


class Trainer:
    def __init__(self, dataset: Dataset, scene: SceneModel, config: RunConfig = RunConfig(), metrics_path=None):
        if not dataset.frames:
            raise ValueError(f"{dataset.root}: dataset has no frames")
        self.dataset = dataset
        self.scene = scene
        self.config = config
        self.train_cfg = config.train
        self.options = RenderOptions.from_config(config.render, config.train.sh_degree)
        self.optimizer = AdamOptimizer(config.train.lr, scene_extent(dataset), config.train.iterations)
        self.rng = np.random.default_rng(config.train.seed)
        self.order = round_robin(dataset.frames)
        self.metrics_path = metrics_path
        self._depth_scales = {}
        for cid in dataset.cameras:
            self.scene.appearance.setdefault(cid, Appearance())

    def _depth_scale(self, model):
        if model.camera_id not in self._depth_scales:
            self._depth_scales[model.camera_id] = warped_depth_scale(model)
        return self._depth_scales[model.camera_id]

    def _check(self, losses: LossBreakdown, iteration: int):
        for term, value in losses.terms().items():
            if not math.isfinite(value):
                logger.error(f"❌ loss term '{term}' is {value} at iteration {iteration}")
                raise TrainingDivergedError(term, value, iteration)

    def step(self, iteration: int):
        """One optimization step on the next round-robin frame; returns (metrics record, LossBreakdown)."""
        cfg = self.train_cfg
        w = cfg.weights
        start = time.perf_counter()
        frame = self.dataset.frames[self.order[(iteration - 1) % len(self.order)]]
        model = self.dataset.cameras[frame.camera_id][0]
        view = assemble_frame(self.scene, frame.timestamp)
        out = render(view.gaussians, frame.pose, model, self.options)

        losses = LossBreakdown()
        grads = RenderGrads()

        color = apply_appearance(out.color, frame.camera_id, self.scene.appearance)
        value, g_color = image_loss_and_grad(color, frame.image, w.lambda_rgb)
        if model.is_fisheye:
            losses.rgb_fisheye = value
        else:
            losses.rgb_pinhole = value
        grads.color, g_scale, g_bias = apply_appearance_vjp(out.color, frame.camera_id, self.scene.appearance, g_color)

        if cfg.use_depth and w.depth > 0.0 and (frame.lidar_depth is not None or frame.depth is not None):
            scale = self._depth_scale(model)
            mono_mask = None if frame.depth is None else frame.depth > 0.0
            value, g_depth = depth_loss_and_grad(out.depth * scale, frame.lidar_depth, frame.lidar_mask,
                                                 frame.depth, mono_mask)
            losses.depth = w.depth * value
            grads.depth = w.depth * g_depth * scale

        if cfg.use_semantic and frame.semantic is not None and view.gaussians.num_classes > 0:
            losses.semantic, grads.semantic = semantic_loss_and_grad(out.semantic, frame.semantic, w.semantic)

        if cfg.use_normal and w.normal > 0.0:
            surface = out.alpha > ALPHA_SURFACE
            depth = np.where(surface, out.depth / np.maximum(out.alpha, 1e-12), 0.0)
            target, valid = depth_to_normals(depth, model)
            value, g_normal = normal_loss_and_grad(out.normal, target, valid & surface)
            losses.normal = w.normal * value
            grads.normal = w.normal * g_normal

        losses.reg, g_reg = reg_loss_and_grad(view.gaussians, w.reg) if len(view.gaussians) else (0.0, None)

        g_lidar = None
        if cfg.use_lidar and frame.scan is not None:
            scan = frame.scan
            pattern = LidarScanPattern.from_points(scan.points, scan.origin, scan.R)
            sim = simulate_scan(view.gaussians, pattern, scan.origin, scan.R, config=self.config.lidar,
                                options=self.options)
            losses.lidar, g_points, g_inten = lidar_loss_for_scan(sim, scan.points, scan.intensity, w.lidar)
            g_lidar = simulate_scan_vjp(sim, g_points, g_inten)

        self._check(losses, iteration)

        flat = render_backward(out, grads)
        if g_reg is not None:
            flat.add_(g_reg)
        if g_lidar is not None:
            flat.add_(g_lidar)
        per_partition = view.split_grads(flat)
        for name in self.scene.partition_names():
            part = self.scene.get_partition(name)
            if len(part):
                self.optimizer.step(name, part, per_partition[name], iteration)

        app = self.scene.appearance[frame.camera_id]
        lr_app = cfg.lr.appearance
        app.scale = np.maximum(self.optimizer.update(f"appearance.{frame.camera_id}.scale", app.scale, g_scale, lr_app),
                               APPEARANCE_MIN_SCALE)
        app.bias = self.optimizer.update(f"appearance.{frame.camera_id}.bias", app.bias, g_bias, lr_app)

        if density_scheduled(iteration, cfg):
            for name in self.scene.partition_names():
                updated, rows = density_control_step(self.scene.get_partition(name), iteration, self.rng, cfg)
                self.scene.set_partition(name, updated)
                self.optimizer.reset_rows(name, rows)

        record = {"iter": iteration, **losses.terms(), "total": losses.total,
                  "psnr_train": psnr(color, frame.image), "gaussian_count": self.scene.gaussian_count()}
        if cfg.record_wall_time:
            record["wall_ms"] = (time.perf_counter() - start) * 1000.0
        return record, losses

    def run(self, progress: bool = False) -> TrainResult:
        result = TrainResult(self.scene)
        n = self.train_cfg.iterations
        sink = None
        if self.metrics_path:
            os.makedirs(os.path.dirname(str(self.metrics_path)) or ".", exist_ok=True)
            sink = open(self.metrics_path, "w", encoding="utf-8")
        try:
            for iteration in tqdm(range(1, n + 1), desc="train", disable=not progress):
                record, losses = self.step(iteration)
                result.metrics.append(record)
                result.losses.append(losses)
                if sink is not None:
                    sink.write(json.dumps(record, sort_keys=True) + "\n")
                if iteration % self.train_cfg.log_interval == 0 or iteration == n:
                    logger.info(f"iter {iteration}/{n}: total {record['total']:.5f}, "
                                f"PSNR {record['psnr_train']:.2f} dB, {record['gaussian_count']} Gaussians")
        finally:
            if sink is not None:
                sink.close()
        logger.info(f"✅ Training finished after {n} iterations")
        return result


def train(dataset: Dataset, scene: SceneModel, config: RunConfig = RunConfig(), metrics_path=None,
          progress: bool = False) -> TrainResult:
    return Trainer(dataset, scene, config, metrics_path).run(progress)


# ---------------------------------------------------------------------------
# held-out evaluation
# ---------------------------------------------------------------------------

def evaluate_frames(scene: SceneModel, dataset: Dataset, frames=None, options: RenderOptions = RenderOptions()) -> dict:
    """Mean PSNR/SSIM per camera type (pinhole / fisheye) and per frame."""
    frames = dataset.frames if frames is None else frames
    per_frame = []
    for frame in frames:
        model = dataset.cameras[frame.camera_id][0]
        out = render(assemble_frame(scene, frame.timestamp).gaussians, frame.pose, model, options)
        color = apply_appearance(out.color, frame.camera_id, scene.appearance) \
            if frame.camera_id in scene.appearance else out.color
        per_frame.append({"image": frame.name, "camera_id": frame.camera_id,
                          "kind": "fisheye" if model.is_fisheye else "pinhole",
                          "psnr": psnr(color, frame.image), "ssim": ssim(color, frame.image)})
    summary = {}
    for kind in ("pinhole", "fisheye"):
        rows = [r for r in per_frame if r["kind"] == kind]
        if rows:
            summary[kind] = {"psnr": float(np.mean([r["psnr"] for r in rows])),
                             "ssim": float(np.mean([r["ssim"] for r in rows])), "frames": len(rows)}
    return {"summary": summary, "frames": per_frame}

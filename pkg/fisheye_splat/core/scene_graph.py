# ============================================
# core/scene_graph.py
# ============================================
"""
Composite driving scene: background, sky and rigid dynamic objects, plus
initialization, per-camera appearance correction and dataset/scene I/O.
"""
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation, Slerp

from fisheye_splat.core.camera_models import (
    CameraModel,
    CameraPose,
    load_cameras,
    pose_from_json,
    validate_rotation,
)
from fisheye_splat.core.errors import SceneVersionError, SchemaError, TrackRangeError
from fisheye_splat.core.gaussian_core import (
    SH_COEFFS,
    GaussianSet,
    logit,
    quat_conjugate,
    quat_mul,
    rgb_to_sh_dc,
    rotmat_to_quat,
)
from fisheye_splat.core.log_utils import get_logger
from fisheye_splat.core.ply_io import read_gaussian_ply, read_point_cloud, write_gaussian_ply
from fisheye_splat.core.utils import load_json, read_image_rgb, read_label_png, read_plane, save_json

logger = get_logger(__name__)

SCENE_VERSION = 1
VOXEL_SIZE = 0.05
FALLBACK_SCALE = 0.1
INIT_OPACITY = 0.1
SKY_RADIUS = 200.0


# ---------------------------------------------------------------------------
# pose tracks
# ---------------------------------------------------------------------------

class PoseTrack:
    """Object-to-world rigid transform keyed by timestamp (lerp + slerp)."""

    def __init__(self, timestamps, rotations, translations):
        self.timestamps = np.asarray(timestamps, dtype=np.float64).reshape(-1)
        self.rotations = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
        self.translations = np.asarray(translations, dtype=np.float64).reshape(-1, 3)
        if len(self.timestamps) == 0:
            raise SchemaError("pose track needs at least one keyframe")
        if len(self.rotations) != len(self.timestamps) or len(self.translations) != len(self.timestamps):
            raise SchemaError("pose track: keyframe arrays have different lengths")
        if np.any(np.diff(self.timestamps) <= 0.0):
            raise SchemaError("pose track: keyframe timestamps must be strictly increasing")
        for i, R in enumerate(self.rotations):
            validate_rotation(R, context=f"pose track keyframe {i}")
        self._slerp = Slerp(self.timestamps, Rotation.from_matrix(self.rotations)) \
            if len(self.timestamps) > 1 else None

    @classmethod
    def static(cls, R=None, t=None) -> "PoseTrack":
        return cls([0.0], [np.eye(3) if R is None else R], [np.zeros(3) if t is None else t])

    def covers(self, timestamp: float) -> bool:
        if self._slerp is None:
            return True
        return self.timestamps[0] <= timestamp <= self.timestamps[-1]

    def at(self, timestamp: float):
        """(R, t) at ``timestamp``; a single-keyframe track is static."""
        if self._slerp is None:
            return self.rotations[0].copy(), self.translations[0].copy()
        if not self.covers(timestamp):
            raise TrackRangeError(
                f"timestamp {timestamp} outside track range [{self.timestamps[0]}, {self.timestamps[-1]}]")
        R = self._slerp([timestamp]).as_matrix()[0]
        j = int(np.clip(np.searchsorted(self.timestamps, timestamp, side="right") - 1, 0, len(self.timestamps) - 2))
        t0, t1 = self.timestamps[j], self.timestamps[j + 1]
        w = (timestamp - t0) / (t1 - t0)
        t = (1.0 - w) * self.translations[j] + w * self.translations[j + 1]
        return R, t

    def to_json(self) -> list:
        return [{"timestamp": float(ts), "R": R.reshape(-1).tolist(), "t": t.tolist()}
                for ts, R, t in zip(self.timestamps, self.rotations, self.translations)]

    @classmethod
    def from_json(cls, keyframes, context: str) -> "PoseTrack":
        if not isinstance(keyframes, list) or not keyframes:
            raise SchemaError(f"{context}: 'keyframes' must be a non-empty array")
        ts, Rs, tr = [], [], []
        for i, kf in enumerate(keyframes):
            missing = {"timestamp", "R", "t"} - set(kf)
            if missing:
                raise SchemaError(f"{context}: keyframe[{i}] missing field '{sorted(missing)[0]}'")
            pose = pose_from_json({"R": kf["R"], "t": kf["t"]}, f"{context}: keyframe[{i}]")
            ts.append(float(kf["timestamp"]))
            Rs.append(pose.R_wc)
            tr.append(pose.t_wc)
        return cls(ts, Rs, tr)


# ---------------------------------------------------------------------------
# scene model
# ---------------------------------------------------------------------------

@dataclass
class DynamicObject:
    object_id: str
    gaussians: GaussianSet
    track: PoseTrack
    size: np.ndarray = field(default_factory=lambda: np.ones(3))


@dataclass
class Appearance:
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(3)
        if np.any(self.scale <= 0.0):
            raise SchemaError(f"appearance scale must be > 0 componentwise, got {self.scale.tolist()}")


@dataclass
class SceneModel:
    background: GaussianSet
    sky: GaussianSet
    dynamic_objects: list = field(default_factory=list)
    appearance: dict = field(default_factory=dict)
    class_names: list = field(default_factory=list)

    def partition_names(self) -> list:
        return ["background", "sky"] + [f"object:{o.object_id}" for o in self.dynamic_objects]

    def get_partition(self, name: str) -> GaussianSet:
        if name == "background":
            return self.background
        if name == "sky":
            return self.sky
        return self._object(name).gaussians

    def set_partition(self, name: str, gaussians: GaussianSet) -> None:
        if name == "background":
            self.background = gaussians
        elif name == "sky":
            self.sky = gaussians
        else:
            self._object(name).gaussians = gaussians

    def _object(self, name: str) -> DynamicObject:
        object_id = name.split(":", 1)[1]
        for obj in self.dynamic_objects:
            if obj.object_id == object_id:
                return obj
        raise KeyError(name)

    def gaussian_count(self) -> int:
        return sum(len(self.get_partition(name)) for name in self.partition_names())

    def copy(self) -> "SceneModel":
        return SceneModel(
            background=self.background.copy(), sky=self.sky.copy(),
            dynamic_objects=[DynamicObject(o.object_id, o.gaussians.copy(), o.track, o.size.copy())
                             for o in self.dynamic_objects],
            appearance={k: Appearance(a.scale.copy(), a.bias.copy()) for k, a in self.appearance.items()},
            class_names=list(self.class_names),
        )


@dataclass
class FrameView:
    """Flat world-space snapshot of a scene at one timestamp."""
    gaussians: GaussianSet
    slices: dict
    transforms: dict
    timestamp: float

    def split_grads(self, grads: GaussianSet) -> dict:
        """Per-partition gradients, mapped back into each object frame."""
        out = {}
        for name, sl in self.slices.items():
            part = grads.take(sl)
            if name in self.transforms:
                R, _, q_track = self.transforms[name]
                part.means = part.means @ R
                part.rotations = quat_mul(quat_conjugate(q_track), part.rotations)
            out[name] = part
        return out


def transform_gaussians(gaussians: GaussianSet, R, t) -> GaussianSet:
    """World copy of an object-frame set: mean -> R mean + t, q -> q_R (x) q."""
    out = gaussians.copy()
    out.means = gaussians.means @ np.asarray(R).T + np.asarray(t)
    out.rotations = quat_mul(rotmat_to_quat(R), gaussians.rotations)
    return out


def assemble_frame(scene: SceneModel, timestamp: float) -> FrameView:
    parts = [scene.background, scene.sky]
    names = ["background", "sky"]
    transforms = {}
    for obj in scene.dynamic_objects:
        R, t = obj.track.at(timestamp)
        name = f"object:{obj.object_id}"
        parts.append(transform_gaussians(obj.gaussians, R, t))
        names.append(name)
        transforms[name] = (R, t, rotmat_to_quat(R))

    slices, start = {}, 0
    for name, part in zip(names, parts):
        slices[name] = slice(start, start + len(part))
        start += len(part)
    flat = GaussianSet.concat(parts)
    return FrameView(flat, slices, transforms, float(timestamp))


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _new_set(means, colors, scales, num_classes: int, opacity: float = INIT_OPACITY) -> GaussianSet:
    n = len(means)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    sh = np.zeros((n, SH_COEFFS, 3))
    sh[:, 0, :] = rgb_to_sh_dc(colors)
    return GaussianSet(
        means=np.asarray(means, dtype=np.float64), rotations=rotations,
        log_scales=np.log(np.asarray(scales, dtype=np.float64)),
        opacity_logits=np.full(n, float(logit(opacity))), sh=sh,
        semantic_logits=np.zeros((n, num_classes)), intensity_logits=np.zeros(n),
    )


def voxel_downsample(points, colors, voxel: float = VOXEL_SIZE):
    """Centroid (and mean colour) of the points falling in each voxel."""
    keys = np.floor(points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    centroids = np.zeros((len(counts), 3))
    mean_colors = np.zeros((len(counts), 3))
    np.add.at(centroids, inverse, points)
    np.add.at(mean_colors, inverse, colors)
    return centroids / counts[:, None], mean_colors / counts[:, None]


def init_from_points(points, colors=None, voxel: float = VOXEL_SIZE, num_classes: int = 0) -> GaussianSet:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("init_from_points needs at least one point")
    colors = np.full((len(points), 3), 0.5) if colors is None else np.asarray(colors, dtype=np.float64)
    if voxel > 0.0:
        points, colors = voxel_downsample(points, colors, voxel)

    n = len(points)
    if n == 1:
        scales = np.full(1, FALLBACK_SCALE)
    else:
        k = min(4, n)
        dists, _ = cKDTree(points).query(points, k=k)
        # column 0 is the point itself
        scales = dists[:, k - 1]
        scales = np.where(scales > 0.0, scales, FALLBACK_SCALE)
    logger.info(f"Initialized {n} Gaussians from {len(np.asarray(points))} points (voxel {voxel} m)")
    return _new_set(points, colors, np.repeat(scales[:, None], 3, axis=1), num_classes)


def init_sky(n: int, center=(0.0, 0.0, 0.0), radius: float = SKY_RADIUS, seed: int = 0,
             color=(0.6, 0.75, 0.9), num_classes: int = 0, sky_class: Optional[int] = None) -> GaussianSet:
    """Uniform directions on the upper (+z) hemisphere at ``radius``."""
    if n < 1:
        raise ValueError("init_sky needs n >= 1")
    if radius < 100.0:
        raise ValueError(f"sky radius must be >= 100 m, got {radius}")
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.0, 1.0, n)
    phi = rng.uniform(0.0, 2.0 * np.pi, n)
    ring = np.sqrt(1.0 - z * z)
    dirs = np.stack([ring * np.cos(phi), ring * np.sin(phi), z], axis=1)
    means = np.asarray(center, dtype=np.float64) + radius * dirs
    spacing = radius * np.sqrt(2.0 * np.pi / n)
    sky = _new_set(means, np.tile(np.asarray(color, dtype=np.float64), (n, 1)),
                   np.full((n, 3), spacing), num_classes, opacity=0.5)
    if sky_class is not None and 0 <= sky_class < num_classes:
        sky.semantic_logits[:, sky_class] = 5.0
    return sky


def init_dynamic_object(object_id: str, size, n: int, seed: int = 0, color=(0.5, 0.5, 0.5),
                        num_classes: int = 0) -> DynamicObject:
    """Random Gaussians inside the annotated box, in the object frame, static track."""
    size = np.asarray(size, dtype=np.float64).reshape(3)
    rng = np.random.default_rng(seed)
    means = rng.uniform(-0.5, 0.5, (n, 3)) * size
    scale = float(np.cbrt(np.prod(size) / max(n, 1))) * 0.5
    gaussians = _new_set(means, np.tile(np.asarray(color, dtype=np.float64), (n, 1)),
                         np.full((n, 3), scale), num_classes)
    return DynamicObject(str(object_id), gaussians, PoseTrack.static(), size)


# ---------------------------------------------------------------------------
# appearance
# ---------------------------------------------------------------------------

def _appearance_for(camera_id: str, appearance: dict) -> Appearance:
    if camera_id not in appearance:
        raise SchemaError(f"camera '{camera_id}' has no appearance entry")
    return appearance[camera_id]


def apply_appearance(img, camera_id: str, appearance: dict) -> np.ndarray:
    app = _appearance_for(camera_id, appearance)
    return np.clip(app.scale * np.asarray(img, dtype=np.float64) + app.bias, 0.0, 1.0)


def apply_appearance_vjp(img, camera_id: str, appearance: dict, grad_out):
    """Returns (grad_img, grad_scale[3], grad_bias[3])."""
    app = _appearance_for(camera_id, appearance)
    img = np.asarray(img, dtype=np.float64)
    raw = app.scale * img + app.bias
    g = np.where((raw > 0.0) & (raw < 1.0), grad_out, 0.0)
    return g * app.scale, np.sum(g * img, axis=(0, 1)), np.sum(g, axis=(0, 1))


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass
class LidarScan:
    points: np.ndarray
    intensity: Optional[np.ndarray]
    origin: np.ndarray
    R: np.ndarray


@dataclass
class FrameSample:
    camera_id: str
    timestamp: float
    image: np.ndarray
    pose: CameraPose
    name: str = ""
    depth: Optional[np.ndarray] = None
    lidar_depth: Optional[np.ndarray] = None
    semantic: Optional[np.ndarray] = None
    scan: Optional[LidarScan] = None

    @property
    def lidar_mask(self) -> Optional[np.ndarray]:
        return None if self.lidar_depth is None else self.lidar_depth > 0.0


@dataclass
class Dataset:
    root: str
    cameras: dict
    frames: list
    points: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None
    tracks: list = field(default_factory=list)
    class_names: list = field(default_factory=list)


_FRAME_FIELDS = {"camera_id", "timestamp", "image", "depth", "lidar_mask", "semantic", "pose", "scan"}


def _check_shape(plane, model: CameraModel, context: str):
    if plane.shape[:2] != (model.height, model.width):
        raise SchemaError(f"{context}: size {plane.shape[1]}x{plane.shape[0]} does not match camera "
                          f"{model.camera_id} ({model.width}x{model.height})")


def _load_frame(root, obj, i, cameras) -> FrameSample:
    context = f"frames.json: frame[{i}]"
    if not isinstance(obj, dict):
        raise SchemaError(f"{context}: expected an object")
    unknown = sorted(set(obj) - _FRAME_FIELDS)
    if unknown:
        raise SchemaError(f"{context}: unknown field '{unknown[0]}'")
    for key in ("camera_id", "timestamp", "image", "pose"):
        if key not in obj:
            raise SchemaError(f"{context}: missing field '{key}'")
    context = f"{context} ({obj['image']})"
    camera_id = str(obj["camera_id"])
    if camera_id not in cameras:
        raise SchemaError(f"{context}: field 'camera_id' names unknown camera '{camera_id}'")
    model = cameras[camera_id][0]

    image = read_image_rgb(os.path.join(root, obj["image"]))
    _check_shape(image, model, f"{context}.image")
    sample = FrameSample(camera_id, float(obj["timestamp"]), image,
                         pose_from_json(obj["pose"], f"{context}.pose"), name=str(obj["image"]))
    if "depth" in obj:
        sample.depth = read_plane(os.path.join(root, obj["depth"]))
        _check_shape(sample.depth, model, f"{context}.depth")
    if "lidar_mask" in obj:
        sample.lidar_depth = read_plane(os.path.join(root, obj["lidar_mask"]))
        _check_shape(sample.lidar_depth, model, f"{context}.lidar_mask")
    if "semantic" in obj:
        sample.semantic = read_label_png(os.path.join(root, obj["semantic"]))
        _check_shape(sample.semantic, model, f"{context}.semantic")
    if "scan" in obj:
        scan = obj["scan"]
        if not isinstance(scan, dict) or not {"points", "origin", "R"} <= set(scan):
            raise SchemaError(f"{context}.scan: needs fields 'points', 'origin' and 'R'")
        pts, _, inten = read_point_cloud(os.path.join(root, scan["points"]))
        R = validate_rotation(np.asarray(scan["R"], dtype=np.float64), context=f"{context}.scan.R")
        sample.scan = LidarScan(pts, inten, np.asarray(scan["origin"], dtype=np.float64).reshape(3), R)
    return sample


def load_dataset(root) -> Dataset:
    root = str(root)
    cameras = {m.camera_id: (m, p) for m, p in load_cameras(os.path.join(root, "cameras.json"))}
    frames_json = load_json(os.path.join(root, "frames.json"))
    if not isinstance(frames_json, list):
        raise SchemaError("frames.json: top level must be an array")
    frames = [_load_frame(root, obj, i, cameras) for i, obj in enumerate(frames_json)]

    points = colors = None
    points_path = os.path.join(root, "points.ply")
    if os.path.exists(points_path):
        points, colors, _ = read_point_cloud(points_path)
    else:
        logger.warning(f"⚠️ {root}: no points.ply, scene initialization needs another source")

    tracks = []
    tracks_path = os.path.join(root, "tracks.json")
    if os.path.exists(tracks_path):
        for i, obj in enumerate(load_json(tracks_path)):
            context = f"tracks.json: track[{i}]"
            for key in ("object_id", "size", "keyframes"):
                if key not in obj:
                    raise SchemaError(f"{context}: missing field '{key}'")
            tracks.append((str(obj["object_id"]), np.asarray(obj["size"], dtype=np.float64),
                           PoseTrack.from_json(obj["keyframes"], context)))

    class_names = []
    classes_path = os.path.join(root, "classes.json")
    if os.path.exists(classes_path):
        class_names = [str(c) for c in load_json(classes_path)]

    logger.info(f"✅ Loaded dataset {root}: {len(cameras)} cameras, {len(frames)} frames, "
                f"{0 if points is None else len(points)} points, {len(tracks)} tracks")
    return Dataset(root, cameras, frames, points, colors, tracks, class_names)


# ---------------------------------------------------------------------------
# scene files
# ---------------------------------------------------------------------------

def save_scene(scene: SceneModel, directory) -> None:
    directory = str(directory)
    os.makedirs(directory, exist_ok=True)
    write_gaussian_ply(os.path.join(directory, "background.ply"), scene.background, precision="f8")
    write_gaussian_ply(os.path.join(directory, "sky.ply"), scene.sky, precision="f8")
    objects = []
    for obj in scene.dynamic_objects:
        rel = os.path.join("objects", f"{obj.object_id}.ply")
        write_gaussian_ply(os.path.join(directory, rel), obj.gaussians, precision="f8")
        objects.append({"object_id": obj.object_id, "ply": rel, "size": obj.size.tolist(),
                        "keyframes": obj.track.to_json()})
    save_json({
        "version": SCENE_VERSION,
        "class_names": list(scene.class_names),
        "appearance": {cid: {"scale": a.scale.tolist(), "bias": a.bias.tolist()}
                       for cid, a in sorted(scene.appearance.items())},
        "background": "background.ply",
        "sky": "sky.ply",
        "dynamic_objects": objects,
    }, os.path.join(directory, "scene.json"))
    logger.info(f"Saved scene with {scene.gaussian_count()} Gaussians to {directory}")


def load_scene(directory) -> SceneModel:
    directory = str(directory)
    meta = load_json(os.path.join(directory, "scene.json"))
    version = meta.get("version")
    if version != SCENE_VERSION:
        raise SceneVersionError(f"scene.json version {version!r} is not supported (expected {SCENE_VERSION})")

    def ply(rel):
        path = os.path.join(directory, rel)
        if not os.path.exists(path):
            raise SchemaError(f"{path}: PLY file not found")
        return read_gaussian_ply(path)

    objects = []
    for i, obj in enumerate(meta.get("dynamic_objects", [])):
        track = PoseTrack.from_json(obj["keyframes"], f"scene.json: dynamic_objects[{i}]")
        objects.append(DynamicObject(str(obj["object_id"]), ply(obj["ply"]), track,
                                     np.asarray(obj.get("size", [1.0, 1.0, 1.0]), dtype=np.float64)))
    appearance = {cid: Appearance(a["scale"], a["bias"]) for cid, a in meta.get("appearance", {}).items()}
    return SceneModel(ply(meta.get("background", "background.ply")), ply(meta.get("sky", "sky.ply")),
                      objects, appearance, list(meta.get("class_names", [])))

# ============================================
# core/utils.py
# ============================================
import json
import os

import numpy as np
from PIL import Image

from fisheye_splat.core.errors import SchemaError


def normalize_map(plane, mask=None):
    """
    Normalizes a depth/intensity plane into [0,1] over the masked pixels.
    """
    plane = np.asarray(plane, dtype=np.float64)
    values = plane[mask] if mask is not None else plane
    if values.size == 0 or values.max() == values.min():
        return np.ones_like(plane) * 0.5

    out = (plane - values.min()) / (values.max() - values.min())
    return np.clip(out, 0.0, 1.0)


def describe_plane(plane):
    """
    Descriptive statistics of a rendered plane, for debug logging.
    """
    plane = np.asarray(plane)
    return {
        'min': float(plane.min()),
        'max': float(plane.max()),
        'mean': float(plane.mean()),
        'std': float(plane.std()),
        'percentile_10': float(np.percentile(plane, 10)),
        'percentile_90': float(np.percentile(plane, 90))
    }


def save_json(obj, path):
    directory = os.path.dirname(str(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)


def load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise SchemaError(f"{path}: file not found") from e
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON ({e})") from e


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def read_image_rgb(path) -> np.ndarray:
    """PNG -> float64 HxWx3 in [0,1]."""
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError as e:
        raise SchemaError(f"{path}: image not found") from e
    return rgb


def to_uint8(image) -> np.ndarray:
    return (np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image_rgb(path, image):
    os.makedirs(os.path.dirname(str(path)) or ".", exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def read_label_png(path) -> np.ndarray:
    """Palette-indexed (mode P) or grayscale label map -> int64 HxW class ids."""
    try:
        with Image.open(path) as img:
            if img.mode not in ("P", "L"):
                raise SchemaError(f"{path}: semantic map must be palette-indexed or 8-bit grayscale, got mode {img.mode}")
            return np.asarray(img, dtype=np.int64)
    except FileNotFoundError as e:
        raise SchemaError(f"{path}: semantic map not found") from e


def write_label_png(path, labels, palette=None):
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    img = Image.frombytes("P", (labels.shape[1], labels.shape[0]), labels.tobytes())
    if palette is None:
        rng = np.random.default_rng(0)
        palette = rng.integers(0, 256, size=(256, 3), dtype=np.uint8)
    img.putpalette(np.asarray(palette, dtype=np.uint8).reshape(-1).tolist())
    os.makedirs(os.path.dirname(str(path)) or ".", exist_ok=True)
    img.save(path, format="PNG")


# ---------------------------------------------------------------------------
# raw float planes with a JSON sidecar
# ---------------------------------------------------------------------------

def sidecar_path(path) -> str:
    return os.path.splitext(str(path))[0] + ".json"


def write_plane(path, plane, channel_names=None):
    plane = np.asarray(plane)
    if plane.ndim == 2:
        plane = plane[:, :, None]
    height, width, channels = plane.shape
    names = list(channel_names) if channel_names is not None else [f"c{i}" for i in range(channels)]
    if len(names) != channels:
        raise ValueError(f"{len(names)} channel names for {channels} channels")

    os.makedirs(os.path.dirname(str(path)) or ".", exist_ok=True)
    plane.astype("<f4").tofile(path)
    save_json({"width": width, "height": height, "channels": channels, "channel_names": names},
              sidecar_path(path))


def read_plane(path) -> np.ndarray:
    """Returns HxW for single-channel planes, HxWxC otherwise (float64)."""
    meta = load_json(sidecar_path(path))
    for key in ("width", "height", "channels"):
        if key not in meta:
            raise SchemaError(f"{sidecar_path(path)}: missing field '{key}'")
    try:
        data = np.fromfile(path, dtype="<f4")
    except FileNotFoundError as e:
        raise SchemaError(f"{path}: plane not found") from e
    expected = meta["width"] * meta["height"] * meta["channels"]
    if data.size != expected:
        raise SchemaError(f"{path}: expected {expected} floats from the sidecar, found {data.size}")
    plane = data.reshape(meta["height"], meta["width"], meta["channels"]).astype(np.float64)
    return plane[:, :, 0] if meta["channels"] == 1 else plane


# ---------------------------------------------------------------------------
# differentiable bilinear sampling
# ---------------------------------------------------------------------------

def _bilinear_setup(shape, xy):
    height, width = shape[:2]
    xy = np.asarray(xy, dtype=np.float64)
    x = np.clip(xy[:, 0], 0.0, width - 1.0)
    y = np.clip(xy[:, 1], 0.0, height - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), width - 2 if width > 1 else 0)
    y0 = np.minimum(np.floor(y).astype(np.int64), height - 2 if height > 1 else 0)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = x - x0
    fy = y - y0
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    rows = np.stack([y0, y0, y1, y1], axis=1)
    cols = np.stack([x0, x1, x0, x1], axis=1)
    return rows, cols, weights


def bilinear_sample(plane, xy) -> np.ndarray:
    """Sample an HxW or HxWxC plane at pixel coordinates xy[N,2] (x=column, y=row)."""
    plane = np.asarray(plane, dtype=np.float64)
    rows, cols, weights = _bilinear_setup(plane.shape, xy)
    values = plane[rows, cols]
    if plane.ndim == 2:
        return np.sum(values * weights, axis=1)
    return np.einsum("nk,nkc->nc", weights, values)


def bilinear_sample_vjp(shape, xy, grad_out) -> np.ndarray:
    """Adjoint of bilinear_sample w.r.t. the plane (sample positions held fixed)."""
    rows, cols, weights = _bilinear_setup(shape, xy)
    grad_plane = np.zeros(shape, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    for k in range(4):
        if len(shape) == 2:
            np.add.at(grad_plane, (rows[:, k], cols[:, k]), weights[:, k] * grad_out)
        else:
            np.add.at(grad_plane, (rows[:, k], cols[:, k]), weights[:, k, None] * grad_out)
    return grad_plane

# ============================================
# core/ply_io.py
# ============================================
"""
Gaussian and point-cloud PLY files (binary little-endian).

Gaussian vertices carry x,y,z, f_dc_0..2, f_rest_0..44 (channel-major),
opacity, scale_0..2, rot_0..3 and the extension properties semantic_i and
intensity.
"""
import os

import numpy as np
from plyfile import PlyData, PlyElement

from fisheye_splat.core.errors import SchemaError
from fisheye_splat.core.gaussian_core import SH_COEFFS, GaussianSet
from fisheye_splat.core.log_utils import get_logger

logger = get_logger(__name__)

REST = SH_COEFFS - 1


def gaussian_attributes(num_classes: int) -> list:
    names = ["x", "y", "z"]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(3 * REST)]
    names.append("opacity")
    names += [f"scale_{i}" for i in range(3)]
    names += [f"rot_{i}" for i in range(4)]
    names += [f"semantic_{i}" for i in range(num_classes)]
    names.append("intensity")
    return names


def _write(path, elements, text=False):
    directory = os.path.dirname(str(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    PlyData(elements, text=text, byte_order="<").write(str(path))


def _read_vertices(path):
    try:
        ply = PlyData.read(str(path))
    except FileNotFoundError as e:
        raise SchemaError(f"{path}: PLY file not found") from e
    except Exception as e:
        raise SchemaError(f"{path}: unreadable PLY ({e})") from e
    if "vertex" not in [el.name for el in ply.elements]:
        raise SchemaError(f"{path}: missing element 'vertex'")
    return ply["vertex"].data


def _column(data, name, path):
    if name not in data.dtype.names:
        raise SchemaError(f"{path}: missing vertex property '{name}'")
    return np.asarray(data[name], dtype=np.float64)


def write_gaussian_ply(path, gaussians: GaussianSet, precision: str = "f4") -> None:
    """precision 'f4' for interchange with other splatting tools, 'f8' for exact round trips."""
    if precision not in ("f4", "f8"):
        raise ValueError(f"precision must be 'f4' or 'f8', got {precision!r}")
    n = len(gaussians)
    # channel-major: all 15 red coefficients, then green, then blue
    rest = np.transpose(gaussians.sh[:, 1:, :], (0, 2, 1)).reshape(n, 3 * REST)
    columns = np.concatenate([
        gaussians.means,
        gaussians.sh[:, 0, :],
        rest,
        gaussians.opacity_logits[:, None],
        gaussians.log_scales,
        gaussians.rotations,
        gaussians.semantic_logits,
        gaussians.intensity_logits[:, None],
    ], axis=1)

    names = gaussian_attributes(gaussians.num_classes)
    vertices = np.empty(n, dtype=[(name, "<" + precision) for name in names])
    for i, name in enumerate(names):
        vertices[name] = columns[:, i]
    _write(path, [PlyElement.describe(vertices, "vertex")])
    logger.debug(f"Wrote {n} Gaussians to {path}")


def read_gaussian_ply(path) -> GaussianSet:
    data = _read_vertices(path)
    n = len(data)
    names = data.dtype.names

    means = np.stack([_column(data, a, path) for a in ("x", "y", "z")], axis=1)
    sh = np.zeros((n, SH_COEFFS, 3))
    sh[:, 0, :] = np.stack([_column(data, f"f_dc_{i}", path) for i in range(3)], axis=1)
    n_rest = len([p for p in names if p.startswith("f_rest_")])
    if n_rest not in (0, 3 * REST):
        raise SchemaError(f"{path}: expected 0 or {3 * REST} f_rest properties, found {n_rest}")
    for j in range(n_rest):
        sh[:, 1 + j % REST, j // REST] = _column(data, f"f_rest_{j}", path)

    num_classes = len([p for p in names if p.startswith("semantic_")])
    semantic = np.stack([_column(data, f"semantic_{i}", path) for i in range(num_classes)], axis=1) \
        if num_classes else np.zeros((n, 0))
    intensity = _column(data, "intensity", path) if "intensity" in names else np.zeros(n)

    return GaussianSet(
        means=means,
        rotations=np.stack([_column(data, f"rot_{i}", path) for i in range(4)], axis=1),
        log_scales=np.stack([_column(data, f"scale_{i}", path) for i in range(3)], axis=1),
        opacity_logits=_column(data, "opacity", path),
        sh=sh,
        semantic_logits=semantic,
        intensity_logits=intensity,
    )


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------

def write_point_cloud(path, points, colors=None, intensity=None) -> None:
    """xyz as f4, optional uchar red/green/blue from [0,1] colours, optional f4 intensity."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dtype = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors is not None:
        dtype += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if intensity is not None:
        dtype.append(("intensity", "<f4"))

    vertices = np.empty(len(points), dtype=dtype)
    for i, axis in enumerate("xyz"):
        vertices[axis] = points[:, i]
    if colors is not None:
        rgb = (np.clip(np.asarray(colors, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        for i, channel in enumerate(("red", "green", "blue")):
            vertices[channel] = rgb[:, i]
    if intensity is not None:
        vertices["intensity"] = np.asarray(intensity, dtype=np.float64)
    _write(path, [PlyElement.describe(vertices, "vertex")])


def read_point_cloud(path):
    """Returns (points[N,3], colors[N,3] in [0,1] or None, intensity[N] or None)."""
    data = _read_vertices(path)
    names = data.dtype.names
    points = np.stack([_column(data, a, path) for a in ("x", "y", "z")], axis=1)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([_column(data, c, path) for c in ("red", "green", "blue")], axis=1)
        if data["red"].dtype.kind in "ui":
            colors = colors / 255.0
    intensity = _column(data, "intensity", path) if "intensity" in names else None
    return points, colors, intensity

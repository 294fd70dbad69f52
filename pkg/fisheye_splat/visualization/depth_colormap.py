# ============================================
# visualization/depth_colormap.py
# ============================================
import os

import cv2
import numpy as np

from fisheye_splat.core.log_utils import get_logger
from fisheye_splat.core.utils import normalize_map

logger = get_logger(__name__)


def colorize_plane(plane, mask=None, colormap=cv2.COLORMAP_TURBO, invert: bool = False) -> np.ndarray:
    """
    Colour-maps a single-channel plane (depth, intensity, alpha) into an
    8-bit RGB preview. Pixels outside ``mask`` are drawn black.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim == 3:
        plane = plane[..., 0]
    if mask is None:
        mask = np.isfinite(plane)
    norm = normalize_map(np.where(mask, plane, 0.0), mask)
    if invert:
        # near = warm
        norm = 1.0 - norm
    bgr = cv2.applyColorMap((norm * 255.0).round().astype(np.uint8), colormap)
    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    rgb[~mask] = 0
    return rgb


def save_depth_preview(path, depth, alpha=None, alpha_threshold: float = 0.5):
    """Writes a TURBO preview of a rendered depth plane, masking empty pixels."""
    depth = np.asarray(depth, dtype=np.float64)
    mask = depth > 0.0
    if alpha is not None:
        mask &= np.asarray(alpha) > alpha_threshold
    if not np.any(mask):
        logger.warning(f"⚠️ depth preview {path}: no covered pixels")
    rgb = colorize_plane(depth, mask, invert=True)
    directory = os.path.dirname(str(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    cv2.imwrite(str(path), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR))
    return rgb

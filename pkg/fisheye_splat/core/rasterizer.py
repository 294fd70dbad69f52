# ============================================
# core/rasterizer.py
# ============================================
"""
Tile-based multi-channel splatting with a hand-written backward pass.

Fisheye cameras are handled by warping every Gaussian first and then
projecting with the pinhole camera that shares the fisheye focal length.
Per-tile work is data parallel; gradients are reduced in tile order so the
result does not depend on the thread count.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from fisheye_splat.core.camera_models import CameraModel, CameraPose, theta_limit
from fisheye_splat.core.fisheye_warp import WarpOptions, warp_gaussians, warp_vjp
from fisheye_splat.core.gaussian_core import (
    GaussianSet,
    _rotmat_unchecked,
    quat_normalize,
    quat_normalize_vjp,
    quat_to_rotmat_vjp,
    sigmoid,
    view_colors,
    view_colors_vjp,
)
from fisheye_splat.core.log_utils import get_logger

logger = get_logger(__name__)

TILE = 16
ALPHA_CAP = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
DILATION = 0.3
FOV_CLAMP = 1.3


@dataclass(frozen=True)
class RenderOptions:
    warp: WarpOptions = field(default_factory=WarpOptions)
    background: tuple = (0.0, 0.0, 0.0)
    threads: int = 1
    near: float = 0.05
    sh_degree: int = 3

    @classmethod
    def from_config(cls, render_cfg, sh_degree: int = 3) -> "RenderOptions":
        return cls(
            warp=WarpOptions(render_cfg.stretch_tangential, render_cfg.stretch_polar, render_cfg.order),
            background=tuple(render_cfg.background), threads=render_cfg.threads,
            near=render_cfg.near, sh_degree=sh_degree,
        )


@dataclass
class ScreenGaussians:
    pixel_means: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray
    view_depth: np.ndarray
    radii: np.ndarray
    valid: np.ndarray
    p_cam: np.ndarray
    T: np.ndarray
    sigma: np.ndarray
    clamp_mask: np.ndarray


@dataclass
class RenderGrads:
    color: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    semantic: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    intensity: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    semantic: np.ndarray
    normal: np.ndarray
    intensity: np.ndarray
    alpha: np.ndarray
    radii: np.ndarray
    visible: np.ndarray
    _ctx: Optional[dict] = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project_to_screen(means, rotations, scales, pose: CameraPose, cam: CameraModel,
                      near: float = 0.05) -> ScreenGaussians:
    """
    Perspective projection of N Gaussians (unit rotations, linear scales)
    through pinhole intrinsics. ``valid`` is False for culled Gaussians.
    """
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    W = pose.R_wc
    p = pose.world_to_camera(means)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    in_front = z > near
    zs = np.where(in_front, z, 1.0)

    fx, fy = cam.fx, cam.fy
    u = fx * x / zs + cam.u0
    v = fy * y / zs + cam.v0

    lim_x = FOV_CLAMP * 0.5 * cam.width / fx
    lim_y = FOV_CLAMP * 0.5 * cam.height / fy
    tx, ty = x / zs, y / zs
    ux, uy = np.clip(tx, -lim_x, lim_x), np.clip(ty, -lim_y, lim_y)
    mask_x = (np.abs(tx) <= lim_x).astype(np.float64)
    mask_y = (np.abs(ty) <= lim_y).astype(np.float64)

    n = len(means)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * ux / zs
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * uy / zs
    T = J @ W

    R = _rotmat_unchecked(rotations)
    sigma = np.einsum("nij,nj,nkj->nik", R, np.asarray(scales) ** 2, R)
    cov = np.einsum("nij,njk,nlk->nil", T, sigma, T)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    cov[:, 0, 0] += DILATION
    cov[:, 1, 1] += DILATION

    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    ok = det > 0.0
    det_safe = np.where(ok, det, 1.0)
    conics = np.stack([c / det_safe, -b / det_safe, a / det_safe], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = np.ceil(3.0 * np.sqrt(lam_max))

    inside = (u + radii >= 0.0) & (u - radii <= cam.width - 1) & \
             (v + radii >= 0.0) & (v - radii <= cam.height - 1)
    valid = in_front & ok & inside & np.isfinite(u) & np.isfinite(v)
    radii = np.where(valid, radii, 0.0).astype(np.int64)

    return ScreenGaussians(
        pixel_means=np.stack([u, v], axis=1), cov2d=cov, conics=conics, view_depth=z,
        radii=radii, valid=valid, p_cam=p, T=T, sigma=sigma,
        clamp_mask=np.stack([mask_x, mask_y, ux, uy], axis=1),
    )


def _fisheye_keep(means, scales, pose: CameraPose, cam: CameraModel, near: float):
    r = means - pose.center
    dist = np.linalg.norm(r, axis=1)
    cos_t = (r @ pose.axis) / np.maximum(dist, 1e-300)
    theta = np.arccos(np.clip(cos_t, -1.0, 1.0))
    margin = 3.0 * np.max(scales, axis=1) / np.maximum(dist, 1e-300)
    bound = np.minimum(cam.theta_max + margin, theta_limit(cam))
    return (dist > near) & (theta <= bound)


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------

def _bin_tiles(screen_means, radii, depth, source_index, width, height):
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    u, v = screen_means[:, 0], screen_means[:, 1]
    x_lo = np.clip(np.ceil(u - radii), 0, width - 1).astype(np.int64)
    x_hi = np.clip(np.floor(u + radii), 0, width - 1).astype(np.int64)
    y_lo = np.clip(np.ceil(v - radii), 0, height - 1).astype(np.int64)
    y_hi = np.clip(np.floor(v + radii), 0, height - 1).astype(np.int64)
    tx0, tx1 = x_lo // TILE, x_hi // TILE
    ty0, ty1 = y_lo // TILE, y_hi // TILE
    ntx = tx1 - tx0 + 1
    counts = ntx * (ty1 - ty0 + 1)

    gid = np.repeat(np.arange(len(u)), counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    offset = np.arange(gid.size) - starts
    ntx_r = ntx[gid]
    tile = (ty0[gid] + offset // ntx_r) * tiles_x + (tx0[gid] + offset % ntx_r)

    order = np.lexsort((source_index[gid], depth[gid], tile))
    sorted_gid = gid[order]
    bounds = np.searchsorted(tile[order], np.arange(tiles_x * tiles_y + 1))
    return sorted_gid, bounds, tiles_x, tiles_y


def _tile_pixels(tile_id, tiles_x, width, height):
    ty, tx = divmod(int(tile_id), tiles_x)
    x0, y0 = tx * TILE, ty * TILE
    x1, y1 = min(x0 + TILE, width), min(y0 + TILE, height)
    ys, xs = np.meshgrid(np.arange(y0, y1), np.arange(x0, x1), indexing="ij")
    return (slice(y0, y1), slice(x0, x1)), xs.reshape(-1).astype(np.float64), ys.reshape(-1).astype(np.float64)


def _tile_weights(gids, px, py, means2d, conics, opacity):
    dx = px[:, None] - means2d[gids, 0][None, :]
    dy = py[:, None] - means2d[gids, 1][None, :]
    A, B, C = conics[gids, 0], conics[gids, 1], conics[gids, 2]
    power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
    gauss = np.exp(np.minimum(power, 0.0))
    raw = opacity[gids][None, :] * gauss
    alpha = np.minimum(ALPHA_CAP, raw)
    alpha = np.where(alpha < ALPHA_MIN, 0.0, alpha)
    t_after = np.cumprod(1.0 - alpha, axis=1)
    included = t_after >= T_MIN
    t_before = np.concatenate([np.ones((len(px), 1)), t_after[:, :-1]], axis=1)
    weights = np.where(included, alpha * t_before, 0.0)
    t_final = np.min(np.where(included, t_after, 1.0), axis=1)
    return {"dx": dx, "dy": dy, "gauss": gauss, "raw": raw, "alpha": alpha,
            "included": included, "t_before": t_before, "weights": weights, "t_final": t_final}


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _normals(R, scales, means, center, R_wc):
    jmin = np.argmin(scales, axis=1)
    idx = np.arange(len(jmin))
    n_world = R[idx, :, jmin]
    facing = np.sum(n_world * (center - means), axis=1)
    sign = np.where(facing < 0.0, -1.0, 1.0)
    return (n_world * sign[:, None]) @ R_wc.T, jmin, sign


def render(gaussians: GaussianSet, pose: CameraPose, cam: CameraModel,
           options: RenderOptions = RenderOptions()) -> RenderOutput:
    width, height = cam.width, cam.height
    n = len(gaussians)
    num_classes = gaussians.num_classes
    n_feat = 3 + 1 + num_classes + 3 + 1
    background = np.zeros(n_feat)
    background[:3] = options.background

    q_hat = quat_normalize(gaussians.rotations) if n else gaussians.rotations.copy()
    scales = gaussians.scales
    colors = view_colors(gaussians.sh, gaussians.means, pose.center, options.sh_degree)

    warped = None
    if cam.is_fisheye:
        keep = np.nonzero(_fisheye_keep(gaussians.means, scales, pose, cam, options.near))[0]
        warped = warp_gaussians(gaussians.means[keep], q_hat[keep], scales[keep], pose, cam, options.warp, keep)
        proj_cam = cam.pinhole_equivalent()
        g_means, g_rots, g_scales = warped.means, warped.rotations, warped.scales
        logger.debug(f"Fisheye cull kept {len(keep)}/{n} Gaussians")
    else:
        keep = np.arange(n)
        proj_cam = cam
        g_means, g_rots, g_scales = gaussians.means, q_hat, scales

    screen = project_to_screen(g_means, g_rots, g_scales, pose, proj_cam, options.near)
    vis = np.nonzero(screen.valid)[0]
    src = keep[vis]

    R = _rotmat_unchecked(g_rots[vis])
    normals, jmin, nsign = _normals(R, g_scales[vis], g_means[vis], pose.center, pose.R_wc)
    features = np.concatenate([
        colors.rgb[src],
        screen.view_depth[vis, None],
        gaussians.semantic_logits[src],
        normals,
        gaussians.intensities[src, None],
    ], axis=1)
    opacity = gaussians.opacities[src]
    means2d = screen.pixel_means[vis]
    conics = screen.conics[vis]

    sorted_gid, bounds, tiles_x, tiles_y = _bin_tiles(
        means2d, screen.radii[vis], screen.view_depth[vis], src, width, height)
    active = [t for t in range(tiles_x * tiles_y) if bounds[t + 1] > bounds[t]]

    def blend(tile_id):
        gids = sorted_gid[bounds[tile_id]:bounds[tile_id + 1]]
        region, px, py = _tile_pixels(tile_id, tiles_x, width, height)
        tw = _tile_weights(gids, px, py, means2d, conics, opacity)
        out = tw["weights"] @ features[gids] + tw["t_final"][:, None] * background
        return region, out, tw["t_final"]

    image = np.broadcast_to(background, (height, width, n_feat)).copy()
    t_final = np.ones((height, width))
    for region, out, tf in _map_tiles(blend, active, options.threads):
        h = region[0].stop - region[0].start
        w = region[1].stop - region[1].start
        image[region] = out.reshape(h, w, n_feat)
        t_final[region] = tf.reshape(h, w)

    radii = np.zeros(n, dtype=np.int64)
    radii[src] = screen.radii[vis]
    visible = np.zeros(n, dtype=bool)
    visible[src] = True

    c0 = 4 + num_classes
    ctx = {
        "gaussians": gaussians, "pose": pose, "cam": cam, "proj_cam": proj_cam, "options": options,
        "q_hat": q_hat, "scales": scales, "colors": colors, "warped": warped, "keep": keep,
        "screen": screen, "vis": vis, "src": src, "R": R, "jmin": jmin, "nsign": nsign,
        "features": features, "opacity": opacity, "means2d": means2d, "conics": conics,
        "sorted_gid": sorted_gid, "bounds": bounds, "tiles_x": tiles_x, "active": active,
        "background": background, "g_rots": g_rots, "g_scales": g_scales,
    }
    logger.debug(f"Rendered {len(vis)} visible Gaussians over {len(active)} tiles ({width}x{height})")
    return RenderOutput(
        color=image[:, :, 0:3], depth=image[:, :, 3], semantic=image[:, :, 4:c0],
        normal=image[:, :, c0:c0 + 3], intensity=image[:, :, c0 + 3], alpha=1.0 - t_final,
        radii=radii, visible=visible, _ctx=ctx,
    )


def _map_tiles(fn, tiles, threads):
    if threads <= 1 or len(tiles) < 2:
        return [fn(t) for t in tiles]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tiles))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _pack_grads(output: RenderOutput, grads: RenderGrads):
    h, w = output.alpha.shape
    nc = output.semantic.shape[2]
    packed = np.zeros((h, w, 8 + nc))
    c0 = 4 + nc
    if grads.color is not None:
        packed[:, :, 0:3] = grads.color
    if grads.depth is not None:
        packed[:, :, 3] = grads.depth
    if grads.semantic is not None:
        packed[:, :, 4:c0] = grads.semantic
    if grads.normal is not None:
        packed[:, :, c0:c0 + 3] = grads.normal
    if grads.intensity is not None:
        packed[:, :, c0 + 3] = grads.intensity
    alpha = np.zeros((h, w)) if grads.alpha is None else np.asarray(grads.alpha, dtype=np.float64)
    return packed, alpha


def render_backward(output: RenderOutput, grads: RenderGrads) -> GaussianSet:
    """Gradients of a scalar loss w.r.t. every parameter of the rendered GaussianSet."""
    ctx = output._ctx
    gaussians: GaussianSet = ctx["gaussians"]
    pose: CameraPose = ctx["pose"]
    out = gaussians.zeros_like()
    if len(gaussians) == 0:
        return out

    g_img, g_alpha = _pack_grads(output, grads)
    features, opacity = ctx["features"], ctx["opacity"]
    means2d, conics = ctx["means2d"], ctx["conics"]
    sorted_gid, bounds, tiles_x = ctx["sorted_gid"], ctx["bounds"], ctx["tiles_x"]
    background = ctx["background"]
    cam = ctx["cam"]
    m = len(ctx["vis"])

    def blend_backward(tile_id):
        gids = sorted_gid[bounds[tile_id]:bounds[tile_id + 1]]
        region, px, py = _tile_pixels(tile_id, tiles_x, cam.width, cam.height)
        tw = _tile_weights(gids, px, py, means2d, conics, opacity)
        g_out = g_img[region].reshape(len(px), -1)
        g_a = g_alpha[region].reshape(-1)
        f = features[gids]

        g_feat = tw["weights"].T @ g_out
        g_w = g_out @ f.T
        contrib = tw["weights"] * g_w
        suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
        t_final = tw["t_final"][:, None]
        bg_term = (g_out @ background)[:, None] * t_final
        one_minus = 1.0 - tw["alpha"]
        g_alpha_i = tw["t_before"] * g_w - (suffix + bg_term) / one_minus + g_a[:, None] * t_final / one_minus
        live = tw["included"] & (tw["raw"] >= ALPHA_MIN) & (tw["raw"] < ALPHA_CAP)
        g_alpha_i = np.where(live, g_alpha_i, 0.0)

        g_op = np.sum(g_alpha_i * tw["gauss"], axis=0)
        g_pow = g_alpha_i * tw["alpha"]
        dx, dy = tw["dx"], tw["dy"]
        A, B, C = conics[gids, 0], conics[gids, 1], conics[gids, 2]
        g_u = np.sum(g_pow * (A * dx + B * dy), axis=0)
        g_v = np.sum(g_pow * (B * dx + C * dy), axis=0)
        g_conic = np.stack([
            np.sum(g_pow * (-0.5 * dx * dx), axis=0),
            np.sum(g_pow * (-dx * dy), axis=0),
            np.sum(g_pow * (-0.5 * dy * dy), axis=0),
        ], axis=1)
        return gids, g_feat, g_op, np.stack([g_u, g_v], axis=1), g_conic

    g_feat = np.zeros_like(features)
    g_op = np.zeros(m)
    g_mean2d = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    for gids, gf, go, gm, gc in _map_tiles(blend_backward, ctx["active"], ctx["options"].threads):
        np.add.at(g_feat, gids, gf)
        np.add.at(g_op, gids, go)
        np.add.at(g_mean2d, gids, gm)
        np.add.at(g_conic, gids, gc)

    return _project_backward(ctx, g_feat, g_op, g_mean2d, g_conic, out)


def _project_backward(ctx, g_feat, g_op, g_mean2d, g_conic, out: GaussianSet) -> GaussianSet:
    gaussians: GaussianSet = ctx["gaussians"]
    pose: CameraPose = ctx["pose"]
    proj_cam: CameraModel = ctx["proj_cam"]
    screen: ScreenGaussians = ctx["screen"]
    vis, src = ctx["vis"], ctx["src"]
    nc = gaussians.num_classes
    c0 = 4 + nc
    W = pose.R_wc

    # conic = inverse(cov2d)
    conic = ctx["conics"]
    Mc = np.stack([np.stack([conic[:, 0], conic[:, 1]], axis=1),
                   np.stack([conic[:, 1], conic[:, 2]], axis=1)], axis=1)
    gM = np.stack([np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], axis=1),
                   np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], axis=1)], axis=1)
    g_cov = -Mc @ gM @ Mc

    T, sigma = screen.T[vis], screen.sigma[vis]
    g_sigma = np.einsum("nji,njk,nkl->nil", T, g_cov, T)
    g_T = 2.0 * g_cov @ T @ sigma
    g_J = g_T @ W.T

    p = screen.p_cam[vis]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    mask_x, mask_y, ux, uy = screen.clamp_mask[vis].T
    fx, fy = proj_cam.fx, proj_cam.fy
    z2 = z * z
    g_x = g_J[:, 0, 2] * (-fx * mask_x / z2) + g_mean2d[:, 0] * fx / z
    g_y = g_J[:, 1, 2] * (-fy * mask_y / z2) + g_mean2d[:, 1] * fy / z
    g_z = (g_J[:, 0, 0] * (-fx / z2) + g_J[:, 1, 1] * (-fy / z2)
           + g_J[:, 0, 2] * fx * (mask_x * x / z + ux) / z2
           + g_J[:, 1, 2] * fy * (mask_y * y / z + uy) / z2
           - g_mean2d[:, 0] * fx * x / z2 - g_mean2d[:, 1] * fy * y / z2
           + g_feat[:, 3])
    g_means_p = np.stack([g_x, g_y, g_z], axis=1) @ W

    # Sigma = R diag(s^2) R^T, plus the normal taken from the smallest axis
    R = ctx["R"]
    s = ctx["g_scales"][vis]
    g_sigma = 0.5 * (g_sigma + np.swapaxes(g_sigma, 1, 2))
    g_R = 2.0 * (g_sigma @ R) * (s ** 2)[:, None, :]
    g_s = 2.0 * s * np.einsum("nji,njk,nki->ni", R, g_sigma, R)
    idx = np.arange(len(vis))
    g_R[idx, :, ctx["jmin"]] += ctx["nsign"][:, None] * (g_feat[:, c0:c0 + 3] @ W)
    g_q = quat_to_rotmat_vjp(ctx["g_rots"][vis], g_R)

    # per-Gaussian channels
    op = ctx["opacity"]
    np.add.at(out.opacity_logits, src, g_op * op * (1.0 - op))
    np.add.at(out.semantic_logits, src, g_feat[:, 4:c0])
    inten = gaussians.intensities[src]
    np.add.at(out.intensity_logits, src, g_feat[:, c0 + 3] * inten * (1.0 - inten))

    colors = ctx["colors"]
    g_rgb = np.zeros((len(gaussians), 3))
    g_rgb[src] = g_feat[:, 0:3]
    g_sh, g_means_color = view_colors_vjp(colors, gaussians.sh, g_rgb)
    out.sh += g_sh
    out.means += g_means_color

    # through the warp (if any) to the input parameters
    keep = ctx["keep"]
    k = len(keep)
    pos = np.searchsorted(keep, src)
    g_mw = np.zeros((k, 3))
    g_qw = np.zeros((k, 4))
    g_sw = np.zeros((k, 3))
    g_mw[pos] = g_means_p
    g_qw[pos] = g_q
    g_sw[pos] = g_s

    warped = ctx["warped"]
    if warped is not None:
        g_mean_in, g_q_unit, g_logs = warp_vjp(warped, g_mw, g_qw, g_sw)
    else:
        g_mean_in, g_q_unit, g_logs = g_mw, g_qw, g_sw * ctx["scales"][keep]

    out.means[keep] += g_mean_in
    out.log_scales[keep] += g_logs
    out.rotations[keep] += quat_normalize_vjp(gaussians.rotations[keep], g_q_unit)
    return out

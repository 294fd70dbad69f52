# ============================================
# core/fisheye_warp.py
# ============================================
"""
Deform 3D Gaussians so that a pinhole projection reproduces a fisheye image.

Each Gaussian is rotated about the camera centre so that its polar angle
becomes theta_d = mirror_transform(theta), then stretched along the local
polar (theta_hat) and azimuthal (phi_hat) directions by k_theta and k_phi.
The stretched covariance is decomposed back into scales and a rotation.

All arrays carry a leading Gaussian axis. ``warp_vjp`` is the exact
reverse-mode pass through the whole pipeline.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from fisheye_splat.core.camera_models import (
    CameraKind,
    CameraModel,
    CameraPose,
    Parameterization,
    _mirror_jet_unchecked,
    mirror_jet,
    unproject_pixels,
)
from fisheye_splat.core.eigen import check_psd, eigh3
from fisheye_splat.core.errors import CameraDomainError
from fisheye_splat.core.gaussian_core import (
    _rotmat_unchecked,
    quat_conjugate,
    quat_from_axis_angle,
    quat_mul,
    quat_mul_vjp,
    quat_to_rotmat_vjp,
    rotmat_to_quat,
    rotmat_to_quat_vjp,
)
from fisheye_splat.core.log_utils import get_logger

logger = get_logger(__name__)

AXIS_EPS = 1e-8
SMALL_THETA = 1e-6
K_THETA_FLOOR = 1e-3
EIG_BROADENING = 1e-8
MIN_EIGVAL = 1e-30


@dataclass(frozen=True)
class WarpOptions:
    stretch_tangential: bool = True
    stretch_polar: bool = True
    order: int = 1

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValueError(f"polar ratio order must be 1 or 2, got {self.order}")

    @classmethod
    def no_stretch(cls, order: int = 1) -> "WarpOptions":
        return cls(stretch_tangential=False, stretch_polar=False, order=order)

    @property
    def stretch(self) -> bool:
        return self.stretch_tangential or self.stretch_polar


@dataclass
class WarpGeometry:
    r_gc: np.ndarray
    dist: np.ndarray
    dirs: np.ndarray
    theta: np.ndarray
    theta_d: np.ndarray
    theta_delta: np.ndarray
    r_rot: np.ndarray
    delta_q: np.ndarray
    on_axis: np.ndarray
    jet: tuple
    theta_hat: Optional[np.ndarray] = None
    phi_hat: Optional[np.ndarray] = None
    k_phi: Optional[np.ndarray] = None
    k_theta: Optional[np.ndarray] = None
    delta_theta: Optional[np.ndarray] = None
    delta_theta_d: Optional[np.ndarray] = None


@dataclass
class WarpedGaussians:
    means: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    covariances: Optional[np.ndarray]
    index: np.ndarray
    geometry: Optional[WarpGeometry] = None
    # retained for the backward pass
    _cache: Optional[dict] = None


# ---------------------------------------------------------------------------
# individual steps
# ---------------------------------------------------------------------------

def _warp_rotation(means, center, axis, cam: CameraModel):
    r_gc = means - center
    dist = np.linalg.norm(r_gc, axis=1)
    dirs = r_gc / np.maximum(dist, 1e-300)[:, None]
    cross = np.cross(np.broadcast_to(axis, dirs.shape), dirs)
    sin_t = np.linalg.norm(cross, axis=1)
    theta = np.arctan2(sin_t, dirs @ axis)
    on_axis = theta < AXIS_EPS

    r_rot = np.where(on_axis[:, None], np.array([1.0, 0.0, 0.0]),
                     cross / np.where(on_axis, 1.0, sin_t)[:, None])
    jet = _mirror_jet_unchecked(cam, theta, Parameterization.NORMALIZED)
    theta_d = jet[0]
    theta_delta = np.where(on_axis, 0.0, theta_d - theta)
    delta_q = quat_from_axis_angle(r_rot, theta_delta)
    return WarpGeometry(r_gc=r_gc, dist=dist, dirs=dirs, theta=theta, theta_d=theta_d,
                        theta_delta=theta_delta, r_rot=r_rot, delta_q=delta_q,
                        on_axis=on_axis, jet=jet)


def compute_warp_rotation(g_mean, pose: CameraPose, cam: CameraModel):
    """Returns (delta_q, theta, theta_d, r_rot) for one Gaussian mean."""
    geom = _warp_rotation(np.asarray(g_mean, dtype=np.float64)[None], pose.center, pose.axis, cam)
    if geom.theta[0] > cam.theta_max + 1e-12:
        raise CameraDomainError(f"Gaussian at polar angle {geom.theta[0]:.4f} rad is beyond theta_max; culled")
    return geom.delta_q[0], float(geom.theta[0]), float(geom.theta_d[0]), geom.r_rot[0]


def _rotate_about(r, n, angle):
    c = np.cos(angle)[:, None]
    s = np.sin(angle)[:, None]
    return c * r + s * np.cross(n, r)


def warp_pose(mean, rotation, delta_q, pose: CameraPose):
    """Rotate the mean about the camera centre by delta_q and pre-multiply the orientation."""
    mean = np.asarray(mean, dtype=np.float64)
    R = _rotmat_unchecked(delta_q)
    mean_w = pose.center + np.einsum("...ij,...j->...i", R, mean - pose.center)
    return mean_w, quat_mul(delta_q, rotation)


def _local_frame(mean_w, center, axis):
    r_w = mean_w - center
    dist_w = np.linalg.norm(r_w, axis=1)
    d_w = r_w / np.maximum(dist_w, 1e-300)[:, None]
    t = d_w @ axis
    u = axis - t[:, None] * d_w
    u_norm = np.linalg.norm(u, axis=1)
    degenerate = u_norm < 1e-12

    theta_hat = u / np.where(degenerate, 1.0, u_norm)[:, None]
    if np.any(degenerate):
        ref = np.where(np.abs(d_w[degenerate, 0:1]) < 0.9, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
        fixed = ref - np.sum(ref * d_w[degenerate], axis=1, keepdims=True) * d_w[degenerate]
        theta_hat[degenerate] = fixed / np.linalg.norm(fixed, axis=1, keepdims=True)
    phi_hat = np.cross(theta_hat, d_w)
    return theta_hat, phi_hat, {"r_w": r_w, "dist_w": dist_w, "d_w": d_w, "t": t,
                                "u_norm": u_norm, "degenerate": degenerate}


def local_frame(mean_w, pose: CameraPose):
    """(theta_hat, phi_hat) at a warped mean; theta_hat points toward the optical axis."""
    mean_w = np.asarray(mean_w, dtype=np.float64)
    theta_hat, phi_hat, _ = _local_frame(np.atleast_2d(mean_w), pose.center, pose.axis)
    if mean_w.ndim == 1:
        return theta_hat[0], phi_hat[0]
    return theta_hat, phi_hat


def stretch_matrix(n_hat, k):
    """S = I + (k - 1) n n^T."""
    n_hat = np.asarray(n_hat, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    outer = n_hat[..., :, None] * n_hat[..., None, :]
    return np.eye(3) + (k[..., None, None] - 1.0) * outer


def _tangential_ratio(theta, theta_d, d1):
    small = theta < SMALL_THETA
    safe = np.where(small, 1.0, theta)
    return np.where(small, d1, np.sin(theta_d) / np.sin(safe))


def tangential_ratio(theta, theta_d, model: CameraModel):
    """k_phi = sin(theta_d) / sin(theta), with the analytic limit near the axis."""
    theta = np.asarray(theta, dtype=np.float64)
    d1 = _mirror_jet_unchecked(model, theta, Parameterization.NORMALIZED)[1]
    out = _tangential_ratio(theta, np.asarray(theta_d, dtype=np.float64), d1)
    return float(out) if out.ndim == 0 else out


def _polar_extent(R_w, scales, theta_hat, dist):
    proj = np.einsum("nji,nj->ni", R_w, theta_hat)
    extent = np.abs(proj) * scales
    j = np.argmax(extent, axis=1)
    idx = np.arange(len(j))
    return 2.0 * extent[idx, j] / dist, proj, j


def _polar_ratio(jet, delta_theta, order):
    d1, d2 = jet[1], jet[2]
    k = d1 if order == 1 else d1 + 0.5 * d2 * delta_theta
    floored = k < K_THETA_FLOOR
    return np.maximum(k, K_THETA_FLOOR), floored


def polar_ratio(rotation_w, scales, theta, dist, theta_hat, model: CameraModel, order: int = 1):
    """
    (k_theta, delta_theta, delta_theta_d). delta_theta is the angular extent of
    the Gaussian along theta_hat, from its post-rotation scaled principal axes.
    """
    single = np.ndim(theta) == 0
    R_w = _rotmat_unchecked(np.atleast_2d(rotation_w))
    scales = np.atleast_2d(scales)
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    dist = np.atleast_1d(np.asarray(dist, dtype=np.float64))
    delta_theta, _, _ = _polar_extent(R_w, scales, np.atleast_2d(theta_hat), dist)
    jet = _mirror_jet_unchecked(model, theta, Parameterization.NORMALIZED)
    k_theta, _ = _polar_ratio(jet, delta_theta, order)
    out = (k_theta, delta_theta, k_theta * delta_theta)
    if single:
        return tuple(float(v[0]) for v in out)
    return out


def warp_covariance(sigma, theta_hat, phi_hat, k_theta, k_phi):
    """Sigma' = S_theta S_phi Sigma S_phi^T S_theta^T."""
    A = stretch_matrix(theta_hat, k_theta) + stretch_matrix(phi_hat, k_phi) - np.eye(3)
    out = A @ sigma @ np.swapaxes(A, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def decompose_covariance(sigma, symmetry_tol: float = 1e-9):
    """(scales, quaternion) with R diag(scales^2) R^T = sigma."""
    sigma = np.asarray(sigma, dtype=np.float64)
    asym = np.max(np.abs(sigma - np.swapaxes(sigma, -1, -2)))
    if asym > symmetry_tol * max(float(np.max(np.abs(sigma))), 1e-300):
        raise ValueError(f"covariance is not symmetric (max asymmetry {asym:.2e})")
    vals, vecs = eigh3(sigma)
    check_psd(vals)
    scales = np.sqrt(np.maximum(vals, MIN_EIGVAL))
    return scales, rotmat_to_quat(vecs)


# ---------------------------------------------------------------------------
# full warp
# ---------------------------------------------------------------------------

def warp_gaussians(means, rotations, scales, pose: CameraPose, cam: CameraModel,
                   options: WarpOptions = WarpOptions(), index=None) -> WarpedGaussians:
    """
    Warp N Gaussians (unit rotations, linear scales). Callers cull Gaussians
    beyond the admissible polar range before calling.
    """
    means = np.asarray(means, dtype=np.float64)
    rotations = np.asarray(rotations, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    index = np.arange(len(means)) if index is None else np.asarray(index)

    if cam.kind is CameraKind.PINHOLE:
        return WarpedGaussians(means.copy(), rotations.copy(), scales.copy(), None, index)

    center, axis = pose.center, pose.axis
    geom = _warp_rotation(means, center, axis, cam)
    mean_w = center + _rotate_about(geom.r_gc, geom.r_rot, geom.theta_delta)
    q_w = quat_mul(geom.delta_q, rotations)
    cache = {"q_in": rotations, "s_in": scales, "q_w": q_w, "mean_w": mean_w,
             "center": center, "axis": axis, "options": options}

    if not options.stretch:
        return WarpedGaussians(mean_w, q_w, scales.copy(), None, index, geom, cache)

    theta_hat, phi_hat, frame = _local_frame(mean_w, center, axis)
    R_w = _rotmat_unchecked(q_w)
    d1 = geom.jet[1]
    n = len(means)

    if options.stretch_tangential:
        k_phi = _tangential_ratio(geom.theta, geom.theta_d, d1)
    else:
        k_phi = np.ones(n)

    delta_theta, proj, jmax = _polar_extent(R_w, scales, theta_hat, geom.dist)
    if options.stretch_polar:
        k_theta, floored = _polar_ratio(geom.jet, delta_theta, options.order)
    else:
        k_theta, floored = np.ones(n), np.ones(n, dtype=bool)

    A = stretch_matrix(theta_hat, k_theta) + stretch_matrix(phi_hat, k_phi) - np.eye(3)
    sigma_w = np.einsum("nij,nj,nkj->nik", R_w, scales ** 2, R_w)
    sigma_p = A @ sigma_w @ A
    sigma_p = 0.5 * (sigma_p + np.swapaxes(sigma_p, -1, -2))

    vals, vecs = eigh3(sigma_p)
    check_psd(vals)
    vals = np.maximum(vals, MIN_EIGVAL)
    scales_p = np.sqrt(vals)
    q_p = rotmat_to_quat(vecs)

    geom.theta_hat, geom.phi_hat = theta_hat, phi_hat
    geom.k_phi, geom.k_theta = k_phi, k_theta
    geom.delta_theta, geom.delta_theta_d = delta_theta, k_theta * delta_theta
    cache.update({"frame": frame, "R_w": R_w, "proj": proj, "jmax": jmax, "floored": floored,
                  "A": A, "sigma_w": sigma_w, "vals": vals, "vecs": vecs, "q_p": q_p})
    return WarpedGaussians(mean_w, q_p, scales_p, sigma_p, index, geom, cache)


def warp_gaussian(g, pose: CameraPose, cam: CameraModel, options: WarpOptions = WarpOptions()) -> WarpedGaussians:
    """Warp a single GaussianPrimitive; raises CameraDomainError beyond theta_max."""
    if cam.kind is not CameraKind.PINHOLE:
        compute_warp_rotation(g.mean, pose, cam)
    return warp_gaussians(g.mean[None], g.rotation[None], np.exp(g.log_scales)[None], pose, cam, options)


# ---------------------------------------------------------------------------
# reverse mode
# ---------------------------------------------------------------------------

def _eigen_vjp(vals, vecs, grad_vals, grad_vecs):
    """Adjoint of Sigma = V diag(vals) V^T, Lorentzian-broadened for close eigenvalues."""
    diff = vals[:, None, :] - vals[:, :, None]           # lambda_j - lambda_i
    eps = EIG_BROADENING * np.max(np.abs(vals), axis=1) ** 2
    F = diff / (diff * diff + eps[:, None, None])
    idx = np.arange(3)
    F[:, idx, idx] = 0.0
    M = np.einsum("nki,nkj->nij", vecs, grad_vecs)
    inner = F * M
    inner[:, idx, idx] += grad_vals
    out = np.einsum("nij,njk,nlk->nil", vecs, inner, vecs)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def _normalize_vjp(vec, norm, grad):
    unit = vec / norm[:, None]
    return (grad - np.sum(grad * unit, axis=1, keepdims=True) * unit) / norm[:, None]


def warp_vjp(warped: WarpedGaussians, grad_means_w, grad_rotations_w, grad_scales_w):
    """
    Pull gradients w.r.t. the warped (mean, unit quaternion, scales) back to
    the input (mean, unit quaternion, log_scales).
    """
    grad_means_w = np.asarray(grad_means_w, dtype=np.float64)
    grad_rotations_w = np.asarray(grad_rotations_w, dtype=np.float64)
    grad_scales_w = np.asarray(grad_scales_w, dtype=np.float64)

    if warped.geometry is None:
        return grad_means_w.copy(), grad_rotations_w.copy(), grad_scales_w * warped.scales

    geom = warped.geometry
    c = warped._cache
    s = c["s_in"]
    axis = c["axis"]
    options = c["options"]
    n = len(s)

    g_mean_w = grad_means_w.copy()
    g_theta = np.zeros(n)
    g_dist = np.zeros(n)

    if not options.stretch:
        g_q_w = grad_rotations_w
        g_s = grad_scales_w.copy()
    else:
        frame = c["frame"]
        R_w, A, sigma_w = c["R_w"], c["A"], c["sigma_w"]
        vals, vecs, q_p = c["vals"], c["vecs"], c["q_p"]
        theta_hat, phi_hat = geom.theta_hat, geom.phi_hat

        # q' = quat(V), s' = sqrt(lambda)
        g_V = rotmat_to_quat_vjp(q_p, vecs, grad_rotations_w)
        g_vals = grad_scales_w / (2.0 * np.sqrt(vals))
        # V = [v1, v2, v1 x v2]
        g_v3 = g_V[:, :, 2]
        g_V = g_V.copy()
        g_V[:, :, 0] += np.cross(vecs[:, :, 1], g_v3)
        g_V[:, :, 1] += np.cross(g_v3, vecs[:, :, 0])
        g_V[:, :, 2] = 0.0
        g_sigma_p = _eigen_vjp(vals, vecs, g_vals, g_V)

        # Sigma' = A Sigma_w A
        g_sigma_w = A @ g_sigma_p @ A
        g_A = g_sigma_p @ A @ sigma_w + sigma_w @ A @ g_sigma_p
        g_A_sym = g_A + np.swapaxes(g_A, -1, -2)
        g_k_theta = np.einsum("ni,nij,nj->n", theta_hat, g_A, theta_hat)
        g_k_phi = np.einsum("ni,nij,nj->n", phi_hat, g_A, phi_hat)
        g_theta_hat = (geom.k_theta - 1.0)[:, None] * np.einsum("nij,nj->ni", g_A_sym, theta_hat)
        g_phi_hat = (geom.k_phi - 1.0)[:, None] * np.einsum("nij,nj->ni", g_A_sym, phi_hat)

        # Sigma_w = R_w diag(s^2) R_w^T
        s2 = s ** 2
        g_R_w = 2.0 * (g_sigma_w @ R_w) * s2[:, None, :]
        g_s = 2.0 * s * np.einsum("nji,njk,nki->ni", R_w, g_sigma_w, R_w)

        d1, d2, d3 = geom.jet[1], geom.jet[2], geom.jet[3]
        g_delta_theta = np.zeros(n)
        if options.stretch_polar:
            live = ~c["floored"]
            if options.order == 1:
                g_theta += np.where(live, g_k_theta * d2, 0.0)
            else:
                g_theta += np.where(live, g_k_theta * (d2 + 0.5 * d3 * geom.delta_theta), 0.0)
                g_delta_theta = np.where(live, 0.5 * d2 * g_k_theta, 0.0)

        # delta_theta = 2 |p_j| s_j / dist with p = R_w^T theta_hat, through the argmax j only
        idx = np.arange(n)
        j = c["jmax"]
        p_j = c["proj"][idx, j]
        g_dist += -g_delta_theta * geom.delta_theta / geom.dist
        g_m = 2.0 * g_delta_theta / geom.dist
        g_s[idx, j] += g_m * np.abs(p_j)
        g_p = g_m * s[idx, j] * np.sign(p_j)
        g_theta_hat += g_p[:, None] * R_w[idx, :, j]
        g_R_w[idx, :, j] += g_p[:, None] * theta_hat

        if options.stretch_tangential:
            small = geom.theta < SMALL_THETA
            safe = np.where(small, 1.0, geom.theta)
            sin_t = np.sin(safe)
            dk = (np.cos(geom.theta_d) * d1 * sin_t - np.sin(geom.theta_d) * np.cos(safe)) / sin_t ** 2
            g_theta += g_k_phi * np.where(small, d2, dk)

        # local frame: phi_hat = theta_hat x d', theta_hat = u / |u|, u = a - (a.d') d'
        d_w = frame["d_w"]
        g_theta_hat += np.cross(d_w, g_phi_hat)
        g_d_w = np.cross(g_phi_hat, theta_hat)
        live_frame = ~frame["degenerate"]
        u_norm = np.where(live_frame, frame["u_norm"], 1.0)
        g_u = _normalize_vjp(theta_hat * u_norm[:, None], u_norm, g_theta_hat)
        g_u[~live_frame] = 0.0
        g_d_w += -frame["t"][:, None] * g_u
        g_t = -np.sum(g_u * d_w, axis=1)
        g_d_w += g_t[:, None] * axis
        g_d_w[~live_frame] = 0.0
        g_mean_w += _normalize_vjp(frame["r_w"], frame["dist_w"], g_d_w)

        g_q_w = quat_to_rotmat_vjp(c["q_w"], g_R_w)

    # q_w = delta_q (x) q
    g_delta_q, g_q = quat_mul_vjp(geom.delta_q, c["q_in"], g_q_w)

    # mean_w = c + cos(td) r + sin(td) (n x r)
    r, nrm, td = geom.r_gc, geom.r_rot, geom.theta_delta
    cos_td, sin_td = np.cos(td)[:, None], np.sin(td)[:, None]
    g_r = cos_td * g_mean_w + sin_td * np.cross(g_mean_w, nrm)
    g_n = sin_td * np.cross(r, g_mean_w)
    g_td = np.sum(g_mean_w * (-sin_td * r + cos_td * np.cross(nrm, r)), axis=1)

    # delta_q = (cos(td/2), sin(td/2) n)
    half = 0.5 * td
    g_td += -0.5 * np.sin(half) * g_delta_q[:, 0] + 0.5 * np.cos(half) * np.sum(g_delta_q[:, 1:] * nrm, axis=1)
    g_n += np.sin(half)[:, None] * g_delta_q[:, 1:]

    # td = theta_d(theta) - theta
    off = ~geom.on_axis
    g_theta += np.where(off, g_td * (geom.jet[1] - 1.0), 0.0)

    # n = (a x d) / sin(theta), theta = acos(a . d)
    sin_t = np.where(off, np.sin(geom.theta), 1.0)
    g_w = (g_n - np.sum(g_n * nrm, axis=1, keepdims=True) * nrm) / sin_t[:, None]
    g_d = np.cross(g_w, np.broadcast_to(axis, g_w.shape))
    g_d += (-g_theta / sin_t)[:, None] * axis
    g_d[~off] = 0.0

    # d = r / |r|
    g_r += _normalize_vjp(r, geom.dist, g_d) + g_dist[:, None] * geom.dirs
    grad_means = g_r
    grad_log_scales = g_s * s
    return grad_means, g_q, grad_log_scales


# ---------------------------------------------------------------------------
# truncation analysis
# ---------------------------------------------------------------------------

def truncation_error(model: CameraModel, theta, delta_theta):
    """Leading terms of the error of the first-order polar ratio: 1/2 D2 dt + 1/6 D3 dt^2."""
    _, _, d2, d3 = mirror_jet(model, theta, Parameterization.NORMALIZED)
    dt = np.asarray(delta_theta, dtype=np.float64)
    return 0.5 * d2 * dt + d3 * dt * dt / 6.0


def relative_truncation_error(model: CameraModel, theta, delta_theta):
    """truncation_error scaled by cos(theta_d), the radial image-scale error."""
    theta_d = mirror_jet(model, theta, Parameterization.NORMALIZED)[0]
    return truncation_error(model, theta, delta_theta) * np.cos(theta_d)


# ---------------------------------------------------------------------------
# depth in warped space
# ---------------------------------------------------------------------------

def warped_depth_scale(cam: CameraModel) -> np.ndarray:
    """
    Per-pixel factor turning z-depth rendered in warped space into z-depth
    of the real camera: ranges are preserved by the warp, polar angles are
    not. Zero outside the image circle; ones for pinhole cameras.
    """
    if not cam.is_fisheye:
        return np.ones((cam.height, cam.width))
    ys, xs = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    pixels = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)
    rays, valid = unproject_pixels(cam, pixels)
    mx = (pixels[:, 0] - cam.u0) / cam.fx
    my = (pixels[:, 1] - cam.v0) / cam.fy
    scale = np.sqrt(1.0 + mx * mx + my * my) * rays[:, 2]
    return np.where(valid, scale, 0.0).reshape(cam.height, cam.width)

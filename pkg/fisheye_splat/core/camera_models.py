# ============================================
# core/camera_models.py
# ============================================
"""
Pinhole, Kannala-Brandt and MEI camera models.

Every fisheye model is split into a "mirror transform" theta -> theta_d that
bends a ray toward the optical axis, followed by a pinhole projection of the
bent ray. The radius function r_d(theta) = tan(theta_d) is what the
projection actually consumes.

MEI models come in two parameterizations that project to the same pixels:
raw (pseudo focal gamma, r_d = chi + k1 chi^3 + k2 chi^5) and normalized
(focal gamma / (1 + xi), r_d multiplied by 1 + xi), the latter having unit
slope at the optical axis like Kannala-Brandt.
"""
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
from scipy import linalg

from fisheye_splat.core.errors import (
    CameraDomainError,
    ConvergenceError,
    SchemaError,
    SingularFitError,
)
from fisheye_splat.core.log_utils import get_logger

logger = get_logger(__name__)

THETA_HARD_CAP = math.pi / 2 + 0.2
PINHOLE_THETA_CAP = math.pi / 2 - 1e-3
CORNER_MARGIN = 0.05
NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
FIT_RADIUS_CAP = 4.0


class CameraKind(str, Enum):
    PINHOLE = "pinhole"
    KANNALA_BRANDT = "kb"
    MEI = "mei"


class Parameterization(str, Enum):
    RAW = "raw"
    NORMALIZED = "normalized"


@dataclass(frozen=True, eq=False)
class CameraModel:
    kind: CameraKind
    width: int
    height: int
    u0: float
    v0: float
    fx: float = 0.0
    fy: float = 0.0
    gamma1: float = 0.0
    gamma2: float = 0.0
    k: tuple = (0.0, 0.0, 0.0, 0.0)
    xi: float = 0.0
    theta_max: Optional[float] = None
    camera_id: str = ""

    def __post_init__(self):
        kind = CameraKind(self.kind)
        object.__setattr__(self, "kind", kind)

        k = tuple(float(v) for v in self.k)
        if len(k) > 4:
            raise ValueError(f"at most 4 distortion coefficients are supported, got {len(k)}")
        k = k + (0.0,) * (4 - len(k))
        if kind is CameraKind.MEI and (k[2] != 0.0 or k[3] != 0.0):
            raise ValueError("MEI models use k1 and k2 only")
        object.__setattr__(self, "k", k)

        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")

        if kind is CameraKind.MEI:
            if self.gamma1 <= 0 or self.gamma2 <= 0:
                raise ValueError("MEI pseudo focal lengths gamma1, gamma2 must be positive")
            if self.xi <= -1.0:
                raise ValueError(f"MEI mirror parameter must satisfy xi > -1, got {self.xi}")
            # the gain eta stays folded into gamma; the KB-equivalent focal is derived
            object.__setattr__(self, "fx", float(self.gamma1) / (1.0 + self.xi))
            object.__setattr__(self, "fy", float(self.gamma2) / (1.0 + self.xi))
        elif self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

        limit = theta_limit(self)
        if self.theta_max is None:
            object.__setattr__(self, "theta_max", _default_theta_max(self, limit))
        else:
            tmax = float(self.theta_max)
            if not (0.0 < tmax <= THETA_HARD_CAP):
                raise ValueError(f"theta_max must lie in (0, pi/2 + 0.2], got {tmax}")
            if tmax > limit + 1e-12:
                raise ValueError(
                    f"theta_max={tmax:.4f} exceeds the range where the mirror transform "
                    f"is admissible and increasing ({limit:.4f})"
                )
            object.__setattr__(self, "theta_max", tmax)

    @property
    def is_fisheye(self) -> bool:
        return self.kind is not CameraKind.PINHOLE

    def focal(self, parameterization=Parameterization.NORMALIZED):
        if self.kind is CameraKind.MEI and Parameterization(parameterization) is Parameterization.RAW:
            return self.gamma1, self.gamma2
        return self.fx, self.fy

    def radial_gain(self, parameterization=Parameterization.NORMALIZED) -> float:
        if self.kind is CameraKind.MEI and Parameterization(parameterization) is Parameterization.NORMALIZED:
            return 1.0 + self.xi
        return 1.0

    def pinhole_equivalent(self) -> "CameraModel":
        """Pinhole camera with the focal the warped Gaussians are projected with."""
        if not self.is_fisheye:
            return self
        return CameraModel(
            kind=CameraKind.PINHOLE, width=self.width, height=self.height,
            u0=self.u0, v0=self.v0, fx=self.fx, fy=self.fy, camera_id=self.camera_id,
        )


# ---------------------------------------------------------------------------
# radius function and its derivatives
# ---------------------------------------------------------------------------

def _radius_jet(model: CameraModel, theta, parameterization=Parameterization.NORMALIZED):
    """r_d(theta) and its first three derivatives, no domain checks."""
    theta = np.asarray(theta, dtype=np.float64)

    if model.kind is CameraKind.PINHOLE:
        t = np.tan(theta)
        sec2 = 1.0 + t * t
        return t, sec2, 2.0 * sec2 * t, 2.0 * sec2 * (sec2 + 2.0 * t * t)

    k1, k2, k3, k4 = model.k
    if model.kind is CameraKind.KANNALA_BRANDT:
        t = theta
        t2 = t * t
        r = t * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))
        r1 = 1.0 + t2 * (3 * k1 + t2 * (5 * k2 + t2 * (7 * k3 + t2 * 9 * k4)))
        r2 = t * (6 * k1 + t2 * (20 * k2 + t2 * (42 * k3 + t2 * 72 * k4)))
        r3 = 6 * k1 + t2 * (60 * k2 + t2 * (210 * k3 + t2 * 504 * k4))
        return r, r1, r2, r3

    xi = model.xi
    c = np.cos(theta)
    s = np.sin(theta)
    den = c + xi
    chi = s / den
    chi1 = (1.0 + xi * c) / den ** 2
    num2 = s * (2.0 + xi * c - xi * xi)
    chi2 = num2 / den ** 3
    dnum2 = c * (2.0 + xi * c - xi * xi) - xi * s * s
    chi3 = dnum2 / den ** 3 + 3.0 * num2 * s / den ** 4

    chi_sq = chi * chi
    g = chi * (1.0 + chi_sq * (k1 + chi_sq * k2))
    g1 = 1.0 + chi_sq * (3 * k1 + chi_sq * 5 * k2)
    g2 = chi * (6 * k1 + chi_sq * 20 * k2)
    g3 = 6 * k1 + chi_sq * 60 * k2

    m = model.radial_gain(parameterization)
    r = m * g
    r1 = m * g1 * chi1
    r2 = m * (g2 * chi1 ** 2 + g1 * chi2)
    r3 = m * (g3 * chi1 ** 3 + 3.0 * g2 * chi1 * chi2 + g1 * chi3)
    return r, r1, r2, r3


def _mirror_jet_unchecked(model: CameraModel, theta, parameterization=Parameterization.NORMALIZED):
    theta = np.asarray(theta, dtype=np.float64)
    if model.kind is CameraKind.PINHOLE:
        zeros = np.zeros_like(theta)
        return theta.copy(), np.ones_like(theta), zeros, zeros.copy()

    r, r1, r2, r3 = _radius_jet(model, theta, parameterization)
    u = 1.0 + r * r
    theta_d = np.arctan(r)
    d1 = r1 / u
    d2 = r2 / u - 2.0 * r * r1 ** 2 / u ** 2
    d3 = (r3 / u - 6.0 * r * r1 * r2 / u ** 2 - 2.0 * r1 ** 3 / u ** 2
          + 8.0 * r * r * r1 ** 3 / u ** 3)
    return theta_d, d1, d2, d3


def _check_theta(model: CameraModel, theta: np.ndarray):
    if np.any(~np.isfinite(theta)) or np.any(theta < 0.0) or np.any(theta > model.theta_max + 1e-12):
        bad = theta[(theta < 0.0) | (theta > model.theta_max + 1e-12) | ~np.isfinite(theta)]
        raise CameraDomainError(
            f"polar angle {float(bad.flat[0]):.6f} rad outside [0, theta_max={model.theta_max:.6f}]"
        )
    if model.kind is CameraKind.MEI and np.any(np.cos(theta) + model.xi <= 0.0):
        raise CameraDomainError("ray lies behind the MEI mirror (cos(theta) + xi <= 0)")


def _scalar_or_array(value, like):
    return float(value) if np.ndim(like) == 0 else value


def mirror_transform(model: CameraModel, theta, parameterization=Parameterization.NORMALIZED):
    """theta -> theta_d = arctan(r_d(theta)). Pinhole models return theta unchanged."""
    theta_arr = np.asarray(theta, dtype=np.float64)
    _check_theta(model, theta_arr)
    theta_d = _mirror_jet_unchecked(model, theta_arr, parameterization)[0]
    return _scalar_or_array(theta_d, theta)


def mirror_derivative(model: CameraModel, theta, order: int = 1,
                      parameterization=Parameterization.NORMALIZED):
    if order not in (1, 2):
        raise ValueError(f"only first and second order derivatives are supported, got {order}")
    theta_arr = np.asarray(theta, dtype=np.float64)
    _check_theta(model, theta_arr)
    jet = _mirror_jet_unchecked(model, theta_arr, parameterization)
    return _scalar_or_array(jet[order], theta)


def mirror_jet(model: CameraModel, theta, parameterization=Parameterization.NORMALIZED):
    """(theta_d, theta_d', theta_d'', theta_d''') with domain checks."""
    theta_arr = np.asarray(theta, dtype=np.float64)
    _check_theta(model, theta_arr)
    return tuple(_scalar_or_array(v, theta) for v in _mirror_jet_unchecked(model, theta_arr, parameterization))


# ---------------------------------------------------------------------------
# admissible range
# ---------------------------------------------------------------------------

def theta_limit(model: CameraModel) -> float:
    """Largest polar angle on which the mirror transform is defined and strictly increasing."""
    if model.kind is CameraKind.PINHOLE:
        return PINHOLE_THETA_CAP

    hard = THETA_HARD_CAP
    if model.kind is CameraKind.MEI and model.xi < 1.0:
        hard = min(hard, math.acos(-model.xi) - 1e-6)

    grid = np.linspace(0.0, hard, 4097)[1:]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        r, r1, _, _ = _radius_jet(model, grid)
    bad = ~(np.isfinite(r) & np.isfinite(r1) & (r1 > 0.0))
    if not np.any(bad):
        return float(hard)
    first = int(np.argmax(bad))
    if first == 0:
        return float(grid[0]) * 0.5
    return float(grid[first - 1])


def _invert_radius(model: CameraModel, target, theta_hi: float,
                   parameterization=Parameterization.NORMALIZED) -> np.ndarray:
    """Solve r_d(theta) = target on [0, theta_hi]; Newton steps safeguarded by bisection."""
    target = np.asarray(target, dtype=np.float64)
    lo = np.zeros_like(target)
    hi = np.full_like(target, theta_hi)
    t = np.clip(np.arctan(target), 0.0, theta_hi)
    converged = target <= 0.0
    t = np.where(converged, 0.0, t)

    for _ in range(NEWTON_MAX_ITER):
        r, r1, _, _ = _radius_jet(model, t, parameterization)
        f = r - target
        lo = np.where(f < 0.0, t, lo)
        hi = np.where(f > 0.0, t, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_new = t - f / r1
        outside = (t_new < lo) | (t_new > hi) | ~np.isfinite(t_new)
        t_new = np.where(outside, 0.5 * (lo + hi), t_new)
        t_new = np.where(converged, t, t_new)
        converged = converged | (np.abs(t_new - t) < NEWTON_TOL)
        t = t_new
        if np.all(converged):
            return t

    raise ConvergenceError(
        f"mirror transform inversion did not converge for {int(np.sum(~converged))} values"
    )


def _default_theta_max(model: CameraModel, limit: float) -> float:
    us = np.array([-0.5, model.width - 0.5])
    vs = np.array([-0.5, model.height - 0.5])
    mx = (us[:, None] - model.u0) / model.fx
    my = (vs[None, :] - model.v0) / model.fy
    r_corner = float(np.max(np.hypot(mx, my)))

    if model.kind is CameraKind.PINHOLE:
        return min(math.atan(r_corner) + CORNER_MARGIN, limit)

    r_limit = float(_radius_jet(model, np.array(limit))[0])
    if r_corner >= r_limit:
        return limit
    theta_corner = float(_invert_radius(model, np.array(r_corner), limit))
    return min(theta_corner + CORNER_MARGIN, limit)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project_points_masked(model: CameraModel, p_cam, parameterization=Parameterization.NORMALIZED):
    """Project camera-frame points; returns (pixels[N,2], valid[N]). Invalid pixels are NaN."""
    p = np.atleast_2d(np.asarray(p_cam, dtype=np.float64))
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    rho_xy = np.hypot(x, y)
    theta = np.arctan2(rho_xy, z)
    valid = (theta <= model.theta_max + 1e-12) & ((rho_xy > 0.0) | (z > 0.0))

    fx, fy = model.focal(parameterization)
    pixels = np.full((p.shape[0], 2), np.nan)

    if model.kind is CameraKind.PINHOLE:
        valid &= z > 0.0
        zs = np.where(valid, z, 1.0)
        pixels[:, 0] = fx * x / zs + model.u0
        pixels[:, 1] = fy * y / zs + model.v0
    else:
        safe_theta = np.where(valid, theta, 0.0)
        r = _radius_jet(model, safe_theta, parameterization)[0]
        on_axis = rho_xy == 0.0
        denom = np.where(on_axis, 1.0, rho_xy)
        cos_phi = np.where(on_axis, 1.0, x / denom)
        sin_phi = np.where(on_axis, 0.0, y / denom)
        pixels[:, 0] = fx * r * cos_phi + model.u0
        pixels[:, 1] = fy * r * sin_phi + model.v0

    pixels[~valid] = np.nan
    return pixels, valid


def project_point(model: CameraModel, p_cam, parameterization=Parameterization.NORMALIZED):
    """Project one point (3,) or a batch (N,3); raises CameraDomainError outside the FOV."""
    pixels, valid = project_points_masked(model, p_cam, parameterization)
    if not np.all(valid):
        raise CameraDomainError(
            f"{int(np.sum(~valid))} point(s) beyond theta_max={model.theta_max:.4f} rad or behind the camera"
        )
    return pixels[0] if np.ndim(p_cam) == 1 else pixels


def unproject_pixels(model: CameraModel, pixels, parameterization=Parameterization.NORMALIZED):
    """Unit camera-frame rays for pixels[N,2]; returns (rays[N,3], valid[N])."""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    fx, fy = model.focal(parameterization)
    mx = (px[:, 0] - model.u0) / fx
    my = (px[:, 1] - model.v0) / fy
    r = np.hypot(mx, my)

    if model.kind is CameraKind.PINHOLE:
        rays = np.stack([mx, my, np.ones_like(mx)], axis=1)
        rays /= np.linalg.norm(rays, axis=1, keepdims=True)
        valid = np.arctan(r) <= model.theta_max + 1e-12
        return rays, valid

    r_max = float(_radius_jet(model, np.array(model.theta_max), parameterization)[0])
    valid = r <= r_max * (1.0 + 1e-12)
    theta = _invert_radius(model, np.minimum(r, r_max), model.theta_max, parameterization)

    on_axis = r == 0.0
    denom = np.where(on_axis, 1.0, r)
    cos_phi = np.where(on_axis, 1.0, mx / denom)
    sin_phi = np.where(on_axis, 0.0, my / denom)
    s = np.sin(theta)
    rays = np.stack([s * cos_phi, s * sin_phi, np.cos(theta)], axis=1)
    return rays, valid


def unproject_pixel(model: CameraModel, pixel, parameterization=Parameterization.NORMALIZED) -> np.ndarray:
    px = np.asarray(pixel, dtype=np.float64)
    if px.shape != (2,):
        raise ValueError(f"expected a single pixel (2,), got shape {px.shape}")
    if not (-0.5 <= px[0] <= model.width - 0.5 and -0.5 <= px[1] <= model.height - 0.5):
        raise CameraDomainError(f"pixel {px.tolist()} outside the {model.width}x{model.height} image")
    rays, valid = unproject_pixels(model, px[None, :], parameterization)
    if not valid[0]:
        raise CameraDomainError(f"pixel {px.tolist()} outside the valid image circle")
    return rays[0]


# ---------------------------------------------------------------------------
# MEI -> Kannala-Brandt conversion
# ---------------------------------------------------------------------------

def default_fit_upper(mei: CameraModel) -> float:
    hi = min(mei.theta_max, math.pi / 2)
    r_hi = float(_radius_jet(mei, np.array(hi))[0])
    if r_hi > FIT_RADIUS_CAP:
        hi = float(_invert_radius(mei, np.array(FIT_RADIUS_CAP), hi))
    return hi


def convert_mei_to_kb(mei: CameraModel, theta_range=None, n_samples: int = 1000) -> CameraModel:
    """
    Fit k1..k4 of a Kannala-Brandt model to the normalized MEI transform.

    Linear least squares on r_d = tan(theta_d) against theta^3, theta^5,
    theta^7, theta^9 with the linear coefficient fixed to 1. Rows are weighted
    by 1 / (1 + r_d^2) so the fit minimizes the first-order error in theta_d.
    """
    if mei.kind is not CameraKind.MEI:
        raise ValueError(f"expected an MEI camera, got {mei.kind.value}")
    if n_samples < 100:
        raise ValueError(f"n_samples must be at least 100, got {n_samples}")

    lo, hi = theta_range if theta_range is not None else (0.0, default_fit_upper(mei))
    lo, hi = float(lo), float(hi)
    if hi > math.pi / 2 + 1e-12 or lo < 0.0 or hi < lo:
        raise ValueError(f"fit range must satisfy 0 <= lo <= hi <= pi/2, got ({lo}, {hi}]")

    theta = lo + (hi - lo) * np.arange(1, n_samples + 1) / n_samples
    r = _radius_jet(mei, theta, Parameterization.NORMALIZED)[0]
    weights = 1.0 / (1.0 + r * r)

    basis = np.stack([theta ** 3, theta ** 5, theta ** 7, theta ** 9], axis=1)
    col_scale = np.max(np.abs(basis), axis=0)
    if np.any(col_scale == 0.0):
        raise SingularFitError("degenerate sampling: a basis column is identically zero")
    design = basis / col_scale * weights[:, None]
    rhs = (r - theta) * weights

    coef, _, rank, _ = linalg.lstsq(design, rhs)
    if rank < 4:
        raise SingularFitError(f"normal equations are singular (rank {rank} < 4); widen the theta range")
    k = tuple(float(v) for v in coef / col_scale)

    kb = CameraModel(
        kind=CameraKind.KANNALA_BRANDT, width=mei.width, height=mei.height,
        u0=mei.u0, v0=mei.v0, fx=mei.fx, fy=mei.fy, k=k, camera_id=mei.camera_id,
    )
    kb = replace(kb, theta_max=min(mei.theta_max, theta_limit(kb)))
    logger.info(f"Converted MEI camera '{mei.camera_id}' (xi={mei.xi}) to KB k={np.round(k, 6).tolist()}")
    return kb


def fit_residual(mei: CameraModel, kb: CameraModel, theta_range=None, n_samples: int = 1000) -> float:
    """Max |theta_d^KB - theta_d^MEI| over the sampled range, radians."""
    lo, hi = theta_range if theta_range is not None else (0.0, default_fit_upper(mei))
    theta = lo + (hi - lo) * np.arange(1, n_samples + 1) / n_samples
    theta = theta[theta <= min(mei.theta_max, kb.theta_max) + 1e-12]
    td_mei = _mirror_jet_unchecked(mei, theta, Parameterization.NORMALIZED)[0]
    td_kb = _mirror_jet_unchecked(kb, theta)[0]
    return float(np.max(np.abs(td_kb - td_mei)))


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------

def validate_rotation(R, tol: float = 1e-3, context: str = "pose") -> np.ndarray:
    R = np.asarray(R, dtype=np.float64).reshape(3, 3)
    err = float(np.max(np.abs(R @ R.T - np.eye(3))))
    if err > tol or np.linalg.det(R) <= 0.0:
        raise SchemaError(f"{context}: rotation is not orthonormal with det +1 (max |RR^T - I| = {err:.2e})")
    return R


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera extrinsics; camera looks along +z, x right, y down."""
    R_wc: np.ndarray = field(default_factory=lambda: np.eye(3))
    t_wc: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R_wc", np.asarray(self.R_wc, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t_wc", np.asarray(self.t_wc, dtype=np.float64).reshape(3))

    @property
    def center(self) -> np.ndarray:
        return -self.R_wc.T @ self.t_wc

    @property
    def axis(self) -> np.ndarray:
        return self.R_wc[2].copy()

    def world_to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R_wc.T + self.t_wc

    def lane_shifted(self, meters: float) -> "CameraPose":
        """Translate the camera along its own x (right) axis."""
        return CameraPose(self.R_wc.copy(), self.t_wc - np.array([meters, 0.0, 0.0]))

    @classmethod
    def from_extrinsics(cls, R, t, tol: float = 1e-3, context: str = "pose") -> "CameraPose":
        return cls(validate_rotation(R, tol, context), np.asarray(t, dtype=np.float64))

    @classmethod
    def look_at(cls, center, target, up=(0.0, 0.0, 1.0)) -> "CameraPose":
        center = np.asarray(center, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - center
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R, -R @ center)

    def to_json(self) -> dict:
        return {"R": self.R_wc.reshape(-1).tolist(), "t": self.t_wc.tolist()}


def pose_from_json(obj, context: str) -> CameraPose:
    if not isinstance(obj, dict) or set(obj) != {"R", "t"}:
        raise SchemaError(f"{context}: pose must be an object with exactly the fields 'R' and 't'")
    R = np.asarray(obj["R"], dtype=np.float64)
    t = np.asarray(obj["t"], dtype=np.float64)
    if R.size != 9 or t.size != 3:
        raise SchemaError(f"{context}: pose.R needs 9 floats and pose.t 3 floats")
    return CameraPose.from_extrinsics(R, t, context=context)


# ---------------------------------------------------------------------------
# cameras.json
# ---------------------------------------------------------------------------

_CAMERA_FIELDS = {"id", "kind", "width", "height", "fx", "fy", "gamma1", "gamma2",
                  "u0", "v0", "xi", "k", "pose", "theta_max"}
_REQUIRED = {"id", "kind", "width", "height", "u0", "v0", "pose"}


def camera_from_json(obj: dict, context: str):
    unknown = sorted(set(obj) - _CAMERA_FIELDS)
    if unknown:
        raise SchemaError(f"{context}: unknown field '{unknown[0]}'")
    missing = sorted(_REQUIRED - set(obj))
    if missing:
        raise SchemaError(f"{context}: missing field '{missing[0]}'")
    try:
        kind = CameraKind(obj["kind"])
    except ValueError:
        raise SchemaError(f"{context}: field 'kind' must be one of pinhole, kb, mei, got {obj['kind']!r}")

    needed = ("gamma1", "gamma2", "xi") if kind is CameraKind.MEI else ("fx", "fy")
    for name in needed:
        if name not in obj:
            raise SchemaError(f"{context}: missing field '{name}' for a {kind.value} camera")

    try:
        model = CameraModel(
            kind=kind,
            width=int(obj["width"]), height=int(obj["height"]),
            u0=float(obj["u0"]), v0=float(obj["v0"]),
            fx=float(obj.get("fx", 0.0)), fy=float(obj.get("fy", 0.0)),
            gamma1=float(obj.get("gamma1", 0.0)), gamma2=float(obj.get("gamma2", 0.0)),
            k=tuple(obj.get("k", ())), xi=float(obj.get("xi", 0.0)),
            theta_max=obj.get("theta_max"), camera_id=str(obj["id"]),
        )
    except (TypeError, ValueError) as e:
        raise SchemaError(f"{context}: {e}") from e
    pose = pose_from_json(obj["pose"], f"{context}.pose")
    return model, pose


def camera_to_json(model: CameraModel, pose: CameraPose) -> dict:
    out = {
        "id": model.camera_id, "kind": model.kind.value,
        "width": model.width, "height": model.height,
        "u0": model.u0, "v0": model.v0,
    }
    if model.kind is CameraKind.MEI:
        out.update({"gamma1": model.gamma1, "gamma2": model.gamma2, "xi": model.xi, "k": list(model.k[:2])})
    else:
        out.update({"fx": model.fx, "fy": model.fy})
        if model.kind is CameraKind.KANNALA_BRANDT:
            out["k"] = list(model.k)
    out["theta_max"] = model.theta_max
    out["pose"] = pose.to_json()
    return out


def load_cameras(path) -> list:
    """Read cameras.json into a list of (CameraModel, CameraPose)."""
    path = str(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, list):
        raise SchemaError(f"{path}: top level must be an array of cameras")
    cameras = [camera_from_json(obj, f"{path}: camera[{i}]") for i, obj in enumerate(data)]
    ids = [m.camera_id for m, _ in cameras]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{path}: duplicate camera ids")
    logger.debug(f"Loaded {len(cameras)} cameras from {path}")
    return cameras


def save_cameras(path, cameras) -> None:
    with open(str(path), "w", encoding="utf-8") as f:
        json.dump([camera_to_json(m, p) for m, p in cameras], f, indent=2)

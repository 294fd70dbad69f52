# ============================================
# core/gaussian_core.py
# ============================================
"""
Gaussian primitives and the quaternion / covariance / spherical-harmonics
algebra. Quaternions are (w, x, y, z) with the Hamilton product.
Every function accepts a leading batch axis.
"""
from dataclasses import dataclass, fields

import numpy as np

from fisheye_splat.core.errors import QuaternionNormError

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)
SH_COEFFS = 16
QUAT_TOL = 1e-6


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_normalize_vjp(q_raw, grad_unit):
    """Adjoint of q -> q / |q| evaluated at the raw quaternion."""
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    q_hat = q_raw / norm
    radial = np.sum(grad_unit * q_hat, axis=-1, keepdims=True)
    return (grad_unit - radial * q_hat) / norm


def quat_mul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_mul_vjp(a, b, grad_c):
    """For c = a (x) b: returns (grad_a, grad_b)."""
    return quat_mul(grad_c, quat_conjugate(b)), quat_mul(quat_conjugate(a), grad_c)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    half = 0.5 * angle
    q = np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1)
    tiny = np.abs(angle) < 1e-12
    if np.any(tiny):
        q = np.where(tiny[..., None], np.array([1.0, 0.0, 0.0, 0.0]), q)
    return q


def _rotmat_unchecked(q):
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=-2)


def quat_to_rotmat(q):
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norm - 1.0) > QUAT_TOL):
        worst = float(np.max(np.abs(norm - 1.0)))
        raise QuaternionNormError(f"quaternion norm deviates from 1 by {worst:.2e} (tolerance {QUAT_TOL})")
    return _rotmat_unchecked(q)


def quat_to_rotmat_vjp(q, grad_R):
    """Adjoint of the polynomial rotation-matrix map at a unit quaternion."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    g = np.asarray(grad_R, dtype=np.float64)
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    gw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    gx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    gy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    gz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return np.stack([gw, gx, gy, gz], axis=-1)


def rotmat_to_quat(R):
    """Shepperd's method; the returned quaternion has w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    batch = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    m00, m11, m22 = R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]
    trace = m00 + m11 + m22
    cands = np.stack([trace, m00, m11, m22], axis=1)
    pick = np.argmax(cands, axis=1)
    q = np.empty((R.shape[0], 4))

    for case in range(4):
        sel = pick == case
        if not np.any(sel):
            continue
        r = R[sel]
        if case == 0:
            s = 2.0 * np.sqrt(1.0 + trace[sel])
            q[sel] = np.stack([0.25 * s, (r[:, 2, 1] - r[:, 1, 2]) / s,
                               (r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 1, 0] - r[:, 0, 1]) / s], axis=1)
        elif case == 1:
            s = 2.0 * np.sqrt(1.0 + r[:, 0, 0] - r[:, 1, 1] - r[:, 2, 2])
            q[sel] = np.stack([(r[:, 2, 1] - r[:, 1, 2]) / s, 0.25 * s,
                               (r[:, 0, 1] + r[:, 1, 0]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s], axis=1)
        elif case == 2:
            s = 2.0 * np.sqrt(1.0 + r[:, 1, 1] - r[:, 0, 0] - r[:, 2, 2])
            q[sel] = np.stack([(r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 0, 1] + r[:, 1, 0]) / s,
                               0.25 * s, (r[:, 1, 2] + r[:, 2, 1]) / s], axis=1)
        else:
            s = 2.0 * np.sqrt(1.0 + r[:, 2, 2] - r[:, 0, 0] - r[:, 1, 1])
            q[sel] = np.stack([(r[:, 1, 0] - r[:, 0, 1]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s,
                               (r[:, 1, 2] + r[:, 2, 1]) / s, 0.25 * s], axis=1)

    q = quat_normalize(q)
    q = np.where(q[:, :1] < 0.0, -q, q)
    return q.reshape(batch + (4,))


def rotmat_to_quat_vjp(q, R, grad_q):
    """
    Adjoint of R -> q restricted to rotations: a perturbation dR = [w]x R
    moves q by 0.5 (0, w) (x) q.
    """
    g = 0.5 * quat_mul(grad_q, quat_conjugate(q))[..., 1:]
    return 0.5 * np.einsum("...ij,...jk->...ik", skew(g), R)


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    zero = np.zeros(v.shape[:-1])
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1),
    ], axis=-2)


def covariance_from_params(rotations, log_scales):
    """Sigma = R diag(s^2) R^T with s = exp(log_scales); rotations must be unit."""
    R = quat_to_rotmat(rotations)
    s2 = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    M = R * s2[..., None, :]
    cov = np.einsum("...ij,...kj->...ik", M, R)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------

def sh_basis(dirs, degree: int = 3):
    """Real SH basis (N,16) at unit directions and its gradient (N,16,3) w.r.t. the direction."""
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    n = d.shape[0]
    B = np.zeros((n, SH_COEFFS))
    G = np.zeros((n, SH_COEFFS, 3))
    B[:, 0] = SH_C0

    if degree >= 1:
        B[:, 1] = -SH_C1 * y
        B[:, 2] = SH_C1 * z
        B[:, 3] = -SH_C1 * x
        G[:, 1, 1] = -SH_C1
        G[:, 2, 2] = SH_C1
        G[:, 3, 0] = -SH_C1

    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        B[:, 4] = SH_C2[0] * x * y
        B[:, 5] = SH_C2[1] * y * z
        B[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        B[:, 7] = SH_C2[3] * x * z
        B[:, 8] = SH_C2[4] * (xx - yy)
        G[:, 4] = SH_C2[0] * np.stack([y, x, 0 * x], axis=1)
        G[:, 5] = SH_C2[1] * np.stack([0 * x, z, y], axis=1)
        G[:, 6] = SH_C2[2] * np.stack([-2 * x, -2 * y, 4 * z], axis=1)
        G[:, 7] = SH_C2[3] * np.stack([z, 0 * x, x], axis=1)
        G[:, 8] = SH_C2[4] * np.stack([2 * x, -2 * y, 0 * x], axis=1)

    if degree >= 3:
        B[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        B[:, 10] = SH_C3[1] * x * y * z
        B[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        B[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        B[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        B[:, 14] = SH_C3[5] * z * (xx - yy)
        B[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
        G[:, 9] = SH_C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, 0 * x], axis=1)
        G[:, 10] = SH_C3[1] * np.stack([y * z, x * z, x * y], axis=1)
        G[:, 11] = SH_C3[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], axis=1)
        G[:, 12] = SH_C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], axis=1)
        G[:, 13] = SH_C3[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], axis=1)
        G[:, 14] = SH_C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], axis=1)
        G[:, 15] = SH_C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, 0 * x], axis=1)

    return B, G


def sh_eval(sh, view_dirs, degree: int = 3):
    """Contract SH coefficients (N,16,3) with the basis; no offset, no clamp."""
    B, _ = sh_basis(view_dirs, degree)
    return np.einsum("nk,nkc->nc", B, np.asarray(sh, dtype=np.float64).reshape(-1, SH_COEFFS, 3))


@dataclass
class ViewColors:
    rgb: np.ndarray
    unclamped: np.ndarray
    dirs: np.ndarray
    dist: np.ndarray
    basis: np.ndarray
    basis_grad: np.ndarray


def view_colors(sh, means, center, degree: int = 3) -> ViewColors:
    """rgb = clamp(SH(dir) + 0.5, 0, 1) with dir from the camera centre to each mean."""
    offset = np.asarray(means, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    dist = np.maximum(np.linalg.norm(offset, axis=1), 1e-12)
    dirs = offset / dist[:, None]
    B, G = sh_basis(dirs, degree)
    raw = np.einsum("nk,nkc->nc", B, sh) + 0.5
    unclamped = (raw > 0.0) & (raw < 1.0)
    return ViewColors(np.clip(raw, 0.0, 1.0), unclamped, dirs, dist, B, G)


def view_colors_vjp(colors: ViewColors, sh, grad_rgb):
    """Returns (grad_sh, grad_means) for the view-dependent colour."""
    g = np.where(colors.unclamped, grad_rgb, 0.0)
    grad_sh = colors.basis[:, :, None] * g[:, None, :]
    # d(value_c)/d(dir) = sum_k sh[k, c] * grad B_k
    grad_dir = np.einsum("nc,nkc,nkj->nj", g, sh, colors.basis_grad)
    radial = np.sum(grad_dir * colors.dirs, axis=1, keepdims=True)
    grad_means = (grad_dir - radial * colors.dirs) / colors.dist[:, None]
    return grad_sh, grad_means


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianPrimitive:
    mean: np.ndarray
    rotation: np.ndarray
    log_scales: np.ndarray
    opacity_logit: float
    sh: np.ndarray
    semantic_logits: np.ndarray
    intensity_logit: float

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))

    def covariance(self):
        return covariance_from_params(self.rotation[None], self.log_scales[None])[0]


PARAM_FIELDS = ("means", "rotations", "log_scales", "opacity_logits", "sh", "semantic_logits", "intensity_logits")


@dataclass
class GaussianSet:
    """Struct-of-arrays container for N primitives. Also used to carry gradients."""
    means: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    semantic_logits: np.ndarray
    intensity_logits: np.ndarray

    def __post_init__(self):
        n = self.means.shape[0]
        for f in fields(self):
            arr = np.asarray(getattr(self, f.name), dtype=np.float64)
            if arr.shape[:1] != (n,):
                raise ValueError(f"field '{f.name}' has {arr.shape[0] if arr.ndim else 0} rows, expected {n}")
            setattr(self, f.name, arr)
        if self.sh.shape[1:] != (SH_COEFFS, 3):
            raise ValueError(f"sh must have shape (N, {SH_COEFFS}, 3), got {self.sh.shape}")

    def __len__(self):
        return self.means.shape[0]

    @property
    def num_classes(self) -> int:
        return self.semantic_logits.shape[1]

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def intensities(self):
        return sigmoid(self.intensity_logits)

    @classmethod
    def empty(cls, n: int = 0, num_classes: int = 1) -> "GaussianSet":
        rotations = np.zeros((n, 4))
        rotations[:, 0] = 1.0
        return cls(
            means=np.zeros((n, 3)), rotations=rotations, log_scales=np.zeros((n, 3)),
            opacity_logits=np.zeros(n), sh=np.zeros((n, SH_COEFFS, 3)),
            semantic_logits=np.zeros((n, num_classes)), intensity_logits=np.zeros(n),
        )

    def zeros_like(self) -> "GaussianSet":
        return GaussianSet(**{name: np.zeros_like(getattr(self, name)) for name in PARAM_FIELDS})

    def copy(self) -> "GaussianSet":
        return GaussianSet(**{name: getattr(self, name).copy() for name in PARAM_FIELDS})

    def take(self, index) -> "GaussianSet":
        return GaussianSet(**{name: getattr(self, name)[index] for name in PARAM_FIELDS})

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            mean=self.means[i].copy(), rotation=self.rotations[i].copy(),
            log_scales=self.log_scales[i].copy(), opacity_logit=float(self.opacity_logits[i]),
            sh=self.sh[i].copy(), semantic_logits=self.semantic_logits[i].copy(),
            intensity_logit=float(self.intensity_logits[i]),
        )

    @classmethod
    def from_primitives(cls, prims) -> "GaussianSet":
        prims = list(prims)
        return cls(
            means=np.array([p.mean for p in prims]).reshape(-1, 3),
            rotations=np.array([p.rotation for p in prims]).reshape(-1, 4),
            log_scales=np.array([p.log_scales for p in prims]).reshape(-1, 3),
            opacity_logits=np.array([p.opacity_logit for p in prims], dtype=np.float64),
            sh=np.array([p.sh for p in prims]).reshape(-1, SH_COEFFS, 3),
            semantic_logits=np.array([p.semantic_logits for p in prims]).reshape(len(prims), -1),
            intensity_logits=np.array([p.intensity_logit for p in prims], dtype=np.float64),
        )

    @classmethod
    def concat(cls, sets) -> "GaussianSet":
        sets = list(sets)
        sets = [s for s in sets if len(s)] or sets[:1]
        classes = {s.num_classes for s in sets}
        if len(classes) > 1:
            raise ValueError(f"cannot concatenate sets with different class counts {sorted(classes)}")
        return cls(**{name: np.concatenate([getattr(s, name) for s in sets], axis=0) for name in PARAM_FIELDS})

    def add_(self, other: "GaussianSet", scale: float = 1.0) -> "GaussianSet":
        for name in PARAM_FIELDS:
            getattr(self, name).__iadd__(scale * getattr(other, name))
        return self

# ============================================
# core/eigen.py
# ============================================
"""
Closed-form eigendecomposition of batches of 3x3 symmetric matrices.

Trigonometric eigenvalues of the max-abs scaled matrix; the eigenvector of
the best separated eigenvalue from the largest cross product of rows of
(A - lambda I), the second from a 2x2 problem in its orthogonal complement,
the third as a cross product.
"""
import numpy as np

from fisheye_splat.core.errors import NotPositiveDefiniteError


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def _orthogonal_complement(w):
    use_x = np.abs(w[:, 0]) > np.abs(w[:, 1])
    inv_a = 1.0 / np.sqrt(w[:, 0] ** 2 + w[:, 2] ** 2 + (~use_x))
    inv_b = 1.0 / np.sqrt(w[:, 1] ** 2 + w[:, 2] ** 2 + use_x)
    zero = np.zeros(w.shape[0])
    u_a = np.stack([-w[:, 2] * inv_a, zero, w[:, 0] * inv_a], axis=1)
    u_b = np.stack([zero, w[:, 2] * inv_b, -w[:, 1] * inv_b], axis=1)
    u = np.where(use_x[:, None], u_a, u_b)
    v = np.cross(w, u)
    return u, v


def _eigenvector_from_rows(A, eigval):
    """Unit null vector of (A - eigval I) from the largest row cross product."""
    rows = A - eigval[:, None, None] * np.eye(3)
    c01 = np.cross(rows[:, 0], rows[:, 1])
    c02 = np.cross(rows[:, 0], rows[:, 2])
    c12 = np.cross(rows[:, 1], rows[:, 2])
    cands = np.stack([c01, c02, c12], axis=1)
    norms = np.sum(cands * cands, axis=2)
    best = np.argmax(norms, axis=1)
    idx = np.arange(A.shape[0])
    vec = cands[idx, best]
    length = np.sqrt(norms[idx, best])
    degenerate = length <= 0.0
    vec = vec / np.where(degenerate, 1.0, length)[:, None]
    vec[degenerate] = np.array([1.0, 0.0, 0.0])
    return vec


def _eigenvector_in_complement(A, evec0, eigval1):
    u, v = _orthogonal_complement(evec0)
    au = np.einsum("nij,nj->ni", A, u)
    av = np.einsum("nij,nj->ni", A, v)
    m00 = _dot(u, au) - eigval1
    m01 = _dot(u, av)
    m11 = _dot(v, av) - eigval1
    a00, a01, a11 = np.abs(m00), np.abs(m01), np.abs(m11)

    with np.errstate(divide="ignore", invalid="ignore"):
        # branch on the larger diagonal entry, then on the dominant entry of that row
        r01 = m01 / m00
        c0 = 1.0 / np.sqrt(1.0 + r01 * r01)
        first_a = (c0 * r01, c0)
        r00 = m00 / m01
        c1 = 1.0 / np.sqrt(1.0 + r00 * r00)
        first_b = (c1, c1 * r00)

        s01 = m01 / m11
        d0 = 1.0 / np.sqrt(1.0 + s01 * s01)
        second_a = (d0, d0 * s01)
        s11 = m11 / m01
        d1 = 1.0 / np.sqrt(1.0 + s11 * s11)
        second_b = (d1 * s11, d1)

    use_first = a00 >= a11
    # coefficients (cu, cv) such that evec1 = cu * u - cv * v
    cu_first = np.where(a00 >= a01, first_a[0], first_b[0])
    cv_first = np.where(a00 >= a01, first_a[1], first_b[1])
    cu_second = np.where(a11 >= a01, second_a[0], second_b[0])
    cv_second = np.where(a11 >= a01, second_a[1], second_b[1])
    cu = np.where(use_first, cu_first, cu_second)
    cv = np.where(use_first, cv_first, cv_second)

    vanish = np.where(use_first, np.maximum(a00, a01), np.maximum(a11, a01)) <= 0.0
    cu = np.where(vanish, 1.0, cu)
    cv = np.where(vanish, 0.0, cv)
    return cu[:, None] * u - cv[:, None] * v


def eigh3(A):
    """
    Eigen-decompose symmetric A[...,3,3].

    Returns (eigvals[...,3] descending, eigvecs[...,3,3] as columns). Each
    of the first two eigenvectors has its largest-magnitude component
    positive and the third is their cross product, so eigvecs is a proper
    rotation.
    """
    A = np.asarray(A, dtype=np.float64)
    batch = A.shape[:-2]
    A = A.reshape(-1, 3, 3)
    n = A.shape[0]

    max_abs = np.max(np.abs(A).reshape(n, 9), axis=1)
    zero = max_abs == 0.0
    scale = np.where(zero, 1.0, max_abs)
    B = A / scale[:, None, None]
    a00, a01, a02 = B[:, 0, 0], B[:, 0, 1], B[:, 0, 2]
    a11, a12, a22 = B[:, 1, 1], B[:, 1, 2], B[:, 2, 2]

    off = a01 * a01 + a02 * a02 + a12 * a12
    diagonal = off <= 0.0

    q = (a00 + a11 + a22) / 3.0
    b00, b11, b22 = a00 - q, a11 - q, a22 - q
    p = np.sqrt((b00 * b00 + b11 * b11 + b22 * b22 + 2.0 * off) / 6.0)
    p_safe = np.where(diagonal, 1.0, p)
    c00 = b11 * b22 - a12 * a12
    c01 = a01 * b22 - a12 * a02
    c02 = a01 * a12 - b11 * a02
    det = (b00 * c00 - a01 * c01 + a02 * c02) / p_safe ** 3
    half_det = np.clip(0.5 * det, -1.0, 1.0)
    angle = np.arccos(half_det) / 3.0
    beta2 = 2.0 * np.cos(angle)
    beta0 = 2.0 * np.cos(angle + 2.0 * np.pi / 3.0)
    beta1 = -(beta0 + beta2)
    ev0, ev1, ev2 = q + p * beta0, q + p * beta1, q + p * beta2

    # the best separated eigenvalue goes first
    top = half_det >= 0.0
    lam_first = np.where(top, ev2, ev0)
    e_first = _eigenvector_from_rows(B, lam_first)
    e_mid = _eigenvector_in_complement(B, e_first, ev1)
    e_last = np.cross(e_first, e_mid)

    vec_hi = np.where(top[:, None], e_first, e_last)
    vec_lo = np.where(top[:, None], e_last, e_first)
    vecs = np.stack([vec_hi, e_mid, vec_lo], axis=2)
    vals = np.stack([ev2, ev1, ev0], axis=1)

    if np.any(diagonal):
        d = np.stack([a00, a11, a22], axis=1)[diagonal]
        order = np.argsort(-d, axis=1, kind="stable")
        vals[diagonal] = np.take_along_axis(d, order, axis=1)
        eye = np.broadcast_to(np.eye(3), (order.shape[0], 3, 3))
        vecs[diagonal] = np.take_along_axis(eye, order[:, None, :], axis=2)

    vals = vals * np.where(zero, 0.0, max_abs)[:, None]

    # deterministic signs, then a right-handed third column
    for col in (0, 1):
        v = vecs[:, :, col]
        lead = np.take_along_axis(v, np.argmax(np.abs(v), axis=1)[:, None], axis=1)[:, 0]
        vecs[:, :, col] = np.where(lead[:, None] < 0.0, -v, v)
    vecs[:, :, 2] = np.cross(vecs[:, :, 0], vecs[:, :, 1])

    return vals.reshape(batch + (3,)), vecs.reshape(batch + (3, 3))


def check_psd(eigvals, tol: float = 1e-9):
    eigvals = np.asarray(eigvals)
    largest = np.max(np.abs(eigvals), axis=-1)
    bad = eigvals[..., -1] < -tol * np.maximum(largest, 1e-300)
    if np.any(bad):
        worst = float(np.min(eigvals[..., -1][bad]))
        raise NotPositiveDefiniteError(f"matrix is not positive semi-definite (smallest eigenvalue {worst:.3e})")

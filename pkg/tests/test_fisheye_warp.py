import math

import numpy as np
import pytest

from fisheye_splat.core.camera_models import (
    CameraKind,
    CameraModel,
    CameraPose,
    mirror_derivative,
    mirror_transform,
    project_point,
    unproject_pixels,
)
from fisheye_splat.core.eigen import eigh3
from fisheye_splat.core.errors import CameraDomainError, NotPositiveDefiniteError
from fisheye_splat.core.fisheye_warp import (
    WarpOptions,
    compute_warp_rotation,
    decompose_covariance,
    local_frame,
    polar_ratio,
    relative_truncation_error,
    stretch_matrix,
    tangential_ratio,
    truncation_error,
    warp_covariance,
    warp_gaussian,
    warp_gaussians,
    warp_pose,
    warp_vjp,
    warped_depth_scale,
)
from fisheye_splat.core.gaussian_core import (
    _rotmat_unchecked,
    covariance_from_params,
    quat_normalize,
    quat_to_rotmat,
)
from fisheye_splat.core.synthetic import mei_camera

KB0 = CameraModel(kind=CameraKind.KANNALA_BRANDT, width=100, height=100, u0=49.5, v0=49.5,
                  fx=40.0, fy=40.0, k=(0.0, 0.0, 0.0, 0.0), theta_max=1.5)
ORIGIN = CameraPose()


def random_rotations(rng, n):
    return quat_normalize(rng.normal(size=(n, 4)))


def random_spd(rng, n, spread=2.0):
    q = random_rotations(rng, n)
    return covariance_from_params(q, rng.uniform(-spread, spread, (n, 3)))


def angle_between(a, b):
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    return np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), np.sum(a * b, axis=-1))


def in_fov_means(rng, cam, pose, n, near=2.0, far=8.0):
    """World points whose fisheye projection falls inside the image."""
    px = np.stack([rng.uniform(0, cam.width - 1, 4 * n), rng.uniform(0, cam.height - 1, 4 * n)], axis=1)
    rays, valid = unproject_pixels(cam, px)
    rays = rays[valid][:n]
    p_cam = rays * rng.uniform(near, far, (len(rays), 1))
    return (p_cam - pose.t_wc) @ pose.R_wc


# ---------------------------------------------------------------------------
# rotation step
# ---------------------------------------------------------------------------

def test_on_axis_gaussian_is_not_rotated():
    dq, theta, theta_d, r_rot = compute_warp_rotation([0.0, 0.0, 5.0], ORIGIN, KB0)
    np.testing.assert_array_equal(dq, [1.0, 0.0, 0.0, 0.0])
    assert theta == 0.0
    np.testing.assert_array_equal(r_rot, [1.0, 0.0, 0.0])


def test_running_example_rotation():
    dq, theta, theta_d, _ = compute_warp_rotation([5.0, 0.0, 5.0], ORIGIN, KB0)
    assert theta == pytest.approx(math.pi / 4, abs=1e-12)
    assert theta_d == pytest.approx(math.atan(math.pi / 4), abs=1e-12)
    assert theta_d == pytest.approx(0.66577, abs=1e-5)
    assert theta_d - theta == pytest.approx(-0.11963, abs=1e-5)
    rotated = quat_to_rotmat(dq) @ np.array([5.0, 0.0, 5.0])
    assert angle_between(rotated, ORIGIN.axis) == pytest.approx(theta_d, abs=1e-10)

    mean_w, q_w = warp_pose(np.array([5.0, 0.0, 5.0]), np.array([1.0, 0, 0, 0]), dq, ORIGIN)
    np.testing.assert_allclose(mean_w, [4.3675, 0.0, 5.5610], atol=1e-4)
    assert np.linalg.norm(mean_w) == pytest.approx(math.sqrt(50.0), abs=1e-10)
    np.testing.assert_allclose(q_w, dq)


def test_warp_pose_identity():
    mean, q = np.array([1.0, 2.0, 3.0]), np.array([0.5, 0.5, 0.5, 0.5])
    out_mean, out_q = warp_pose(mean, q, np.array([1.0, 0, 0, 0]), ORIGIN)
    np.testing.assert_allclose(out_mean, mean)
    np.testing.assert_allclose(out_q, q)


def test_cull_beyond_theta_max():
    narrow = CameraModel(kind=CameraKind.KANNALA_BRANDT, width=10, height=10, u0=5, v0=5, fx=10, fy=10,
                         theta_max=0.5)
    with pytest.raises(CameraDomainError):
        compute_warp_rotation([5.0, 0.0, 1.0], ORIGIN, narrow)


@pytest.mark.parametrize("cam", [KB0, mei_camera(64, 64, 1.0, 0.7), mei_camera(64, 64, 0.5, 0.5)])
def test_warp_geometry_invariants(cam, rng):
    pose = CameraPose.look_at([0.3, -0.2, 0.1], [1.0, 2.0, 5.0])
    means = in_fov_means(rng, cam, pose, 1000)
    rotations = random_rotations(rng, len(means))
    scales = np.exp(rng.uniform(-3.0, -1.0, (len(means), 3)))
    warped = warp_gaussians(means, rotations, scales, pose, cam)

    r_gc = means - pose.center
    r_w = warped.means - pose.center
    theta_d = mirror_transform(cam, angle_between(r_gc, np.broadcast_to(pose.axis, r_gc.shape)))
    # the warped angle to the axis is theta_d, distance unchanged
    np.testing.assert_allclose(angle_between(r_w, np.broadcast_to(pose.axis, r_w.shape)), theta_d, atol=1e-10)
    np.testing.assert_allclose(np.linalg.norm(r_w, axis=1), np.linalg.norm(r_gc, axis=1), rtol=1e-12)

    # convert-project == direct fisheye projection
    pin = cam.pinhole_equivalent()
    direct = project_point(cam, pose.world_to_camera(means))
    via_pinhole = project_point(pin, pose.world_to_camera(warped.means))
    np.testing.assert_allclose(via_pinhole, direct, atol=1e-6)

    g = warped.geometry
    assert np.all(g.k_theta > 0) and np.all(g.k_phi > 0)
    d = r_w / np.linalg.norm(r_w, axis=1, keepdims=True)
    for a, b in ((g.theta_hat, g.phi_hat), (g.theta_hat, d), (g.phi_hat, d)):
        assert np.max(np.abs(np.sum(a * b, axis=1))) < 1e-10

    # determinant identity of the stretch
    sigma = covariance_from_params(warped._cache["q_w"], np.log(scales))
    ratio = np.linalg.det(warped.covariances) / np.linalg.det(sigma)
    np.testing.assert_allclose(ratio, (g.k_theta * g.k_phi) ** 2, rtol=1e-9)


# ---------------------------------------------------------------------------
# local frame and stretch matrices
# ---------------------------------------------------------------------------

def test_local_frame_meridional_example():
    alpha = 0.4
    theta_hat, phi_hat = local_frame(np.array([math.sin(alpha), 0.0, math.cos(alpha)]) * 3.0, ORIGIN)
    np.testing.assert_allclose(theta_hat, [-math.cos(alpha), 0.0, math.sin(alpha)], atol=1e-12)
    d = np.array([math.sin(alpha), 0.0, math.cos(alpha)])
    np.testing.assert_allclose(phi_hat, np.cross(theta_hat, d), atol=1e-12)
    assert abs(phi_hat[1]) == pytest.approx(1.0)


def test_local_frame_on_axis_is_orthonormal():
    theta_hat, phi_hat = local_frame(np.array([0.0, 0.0, 4.0]), ORIGIN)
    d = np.array([0.0, 0.0, 1.0])
    for a, b in ((theta_hat, phi_hat), (theta_hat, d), (phi_hat, d)):
        assert abs(a @ b) < 1e-12
    assert np.linalg.norm(theta_hat) == pytest.approx(1.0)


def test_local_frame_random_orthonormal(rng):
    pose = CameraPose.look_at([1.0, 1.0, 1.0], [0.0, 3.0, 2.0])
    pts = rng.normal(size=(500, 3)) * 4.0
    theta_hat, phi_hat = local_frame(pts, pose)
    d = (pts - pose.center) / np.linalg.norm(pts - pose.center, axis=1, keepdims=True)
    for a, b in ((theta_hat, phi_hat), (theta_hat, d), (phi_hat, d)):
        assert np.max(np.abs(np.sum(a * b, axis=1))) < 1e-12
    np.testing.assert_allclose(np.linalg.norm(phi_hat, axis=1), 1.0, atol=1e-12)


def test_stretch_matrix_examples(rng):
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    np.testing.assert_allclose(stretch_matrix(n, 1.0), np.eye(3))
    np.testing.assert_allclose(stretch_matrix([0, 0, 1.0], 0.5), np.diag([1, 1, 0.5]))
    S = stretch_matrix(np.array([1.0, 1.0, 0.0]) / math.sqrt(2), 3.0)
    np.testing.assert_allclose(S, [[2, 1, 0], [1, 2, 0], [0, 0, 1]], atol=1e-15)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(S)), [1, 1, 3], atol=1e-12)


def test_orthogonal_stretches_commute(rng):
    a = rng.normal(size=3)
    a /= np.linalg.norm(a)
    b = np.cross(a, rng.normal(size=3))
    b /= np.linalg.norm(b)
    Sa, Sb = stretch_matrix(a, 0.3), stretch_matrix(b, 1.7)
    np.testing.assert_allclose(Sa @ Sb, Sb @ Sa, atol=1e-12)


# ---------------------------------------------------------------------------
# ratios
# ---------------------------------------------------------------------------

def test_tangential_ratio_examples():
    assert tangential_ratio(0.4, 0.4, KB0) == pytest.approx(1.0)
    theta_d = math.atan(math.pi / 4)
    assert tangential_ratio(math.pi / 4, theta_d, KB0) == pytest.approx(math.sin(theta_d) / math.sin(math.pi / 4))
    assert tangential_ratio(math.pi / 4, theta_d, KB0) == pytest.approx(0.87368, abs=1e-4)
    assert tangential_ratio(1e-8, 1e-8, mei_camera(64, 64, 1.0, 0.7)) == pytest.approx(1.0, abs=1e-12)


def test_polar_ratio_first_order_is_the_derivative(rng):
    theta = math.pi / 4
    for _ in range(5):
        q = random_rotations(rng, 1)[0]
        scales = np.exp(rng.uniform(-3, 0, 3))
        k, dt, dtd = polar_ratio(q, scales, theta, 7.0, np.array([-1.0, 0, 0]), KB0, order=1)
        assert k == pytest.approx(1.0 / (1.0 + theta ** 2))
        assert dtd == pytest.approx(k * dt)
    assert 1.0 / (1.0 + (math.pi / 4) ** 2) == pytest.approx(0.61850, abs=1e-5)


def test_polar_ratio_second_order_matches_secant():
    # a sphere of radius 0.07 at distance 7 spans exactly 0.02 rad
    theta, dist = 0.7, 7.0
    k, dt, _ = polar_ratio(np.array([1.0, 0, 0, 0]), np.full(3, 0.07), theta, dist,
                           np.array([0.0, 1.0, 0.0]), KB0, order=2)
    assert dt == pytest.approx(0.02)
    secant = (mirror_transform(KB0, theta + dt) - mirror_transform(KB0, theta)) / dt
    assert k == pytest.approx(mirror_derivative(KB0, theta, 1) + 0.5 * mirror_derivative(KB0, theta, 2) * dt)
    assert abs(k - secant) < 1e-4


def test_truncation_error_matches_taylor_remainder():
    cam = mei_camera(64, 64, 1.0, 0.7)
    thetas = np.linspace(0.05, 1.2, 24)
    for dt in (0.005, 0.02, 0.04):
        eps = truncation_error(cam, thetas, dt)
        exact = (mirror_transform(cam, thetas + dt) - mirror_transform(cam, thetas)
                 - mirror_derivative(cam, thetas, 1) * dt)
        assert np.max(np.abs(eps * dt - exact)) < 1e-6
    rel = relative_truncation_error(cam, thetas, 0.02)
    np.testing.assert_allclose(rel, truncation_error(cam, thetas, 0.02) * np.cos(mirror_transform(cam, thetas)))


# ---------------------------------------------------------------------------
# covariance
# ---------------------------------------------------------------------------

def test_warp_covariance_examples(rng):
    sigma = random_spd(rng, 1)[0]
    x, y = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    np.testing.assert_allclose(warp_covariance(sigma, x, y, 1.0, 1.0), sigma, atol=1e-14)
    np.testing.assert_allclose(warp_covariance(np.eye(3), x, y, 0.5, 0.8), np.diag([0.25, 0.64, 1.0]), atol=1e-15)
    out = warp_covariance(sigma, x, y, 0.5, 0.8)
    assert np.linalg.det(out) == pytest.approx((0.5 * 0.8) ** 2 * np.linalg.det(sigma), rel=1e-9)


def test_decompose_diagonal():
    scales, q = decompose_covariance(np.diag([4.0, 1.0, 0.25]))
    np.testing.assert_allclose(scales, [2.0, 1.0, 0.5])
    R = quat_to_rotmat(q)
    assert np.linalg.det(R) == pytest.approx(1.0)
    np.testing.assert_allclose(R @ np.diag(scales ** 2) @ R.T, np.diag([4.0, 1.0, 0.25]), atol=1e-14)


def test_decompose_repeated_eigenvalues():
    sigma = np.diag([1.0, 1.0, 4.0])
    scales, q = decompose_covariance(sigma)
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R @ np.diag(scales ** 2) @ R.T, sigma, atol=1e-14)


def test_decompose_round_trip(rng):
    sigma = random_spd(rng, 10000, spread=3.0)
    # a few near-degenerate spectra
    sigma[:50] = covariance_from_params(random_rotations(rng, 50),
                                        np.log(np.array([1.0, 1.0 + 1e-7, 0.3]))[None].repeat(50, 0))
    scales, q = decompose_covariance(sigma)
    R = _rotmat_unchecked(q)
    recon = np.einsum("nij,nj,nkj->nik", R, scales ** 2, R)
    err = np.linalg.norm(recon - sigma, axis=(1, 2)) / np.linalg.norm(sigma, axis=(1, 2))
    assert np.max(err) < 1e-9
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)


def test_decompose_rejects_bad_input():
    with pytest.raises(NotPositiveDefiniteError):
        decompose_covariance(np.diag([1.0, 0.5, -0.2]))
    with pytest.raises(ValueError):
        decompose_covariance(np.array([[1.0, 0.5, 0], [0.0, 1.0, 0], [0, 0, 1.0]]))


def test_eigh3_matches_numpy(rng):
    A = random_spd(rng, 2000)
    vals, vecs = eigh3(A)
    ref = np.linalg.eigvalsh(A)[:, ::-1]
    np.testing.assert_allclose(vals, ref, rtol=1e-8, atol=1e-11 * np.max(np.abs(ref)))
    assert np.all(np.diff(vals, axis=1) <= 0)
    np.testing.assert_allclose(np.linalg.det(vecs), 1.0, atol=1e-10)
    np.testing.assert_allclose(np.einsum("nij,nj,nkj->nik", vecs, vals, vecs), A, atol=1e-9)


# ---------------------------------------------------------------------------
# full warp
# ---------------------------------------------------------------------------

def test_pinhole_warp_is_identity(small_scene, pinhole_32):
    warped = warp_gaussians(small_scene.means, small_scene.rotations, small_scene.scales, ORIGIN, pinhole_32)
    np.testing.assert_array_equal(warped.means, small_scene.means)
    np.testing.assert_array_equal(warped.rotations, small_scene.rotations)
    np.testing.assert_array_equal(warped.scales, small_scene.scales)


def test_degenerate_mei_is_identity(small_scene):
    cam = CameraModel(kind=CameraKind.MEI, width=64, height=64, u0=31.5, v0=31.5, gamma1=40.0, gamma2=40.0, xi=0.0)
    warped = warp_gaussians(small_scene.means, small_scene.rotations, small_scene.scales, ORIGIN, cam)
    np.testing.assert_allclose(warped.means, small_scene.means, atol=1e-9)
    np.testing.assert_allclose(warped.scales, np.sort(small_scene.scales, axis=1)[:, ::-1], atol=1e-9)
    recon = covariance_from_params(warped.rotations, np.log(warped.scales))
    np.testing.assert_allclose(recon, covariance_from_params(small_scene.rotations, small_scene.log_scales),
                               atol=1e-9)


def test_warp_gaussian_single_primitive(small_scene):
    prim = small_scene.primitive(0)
    single = warp_gaussian(prim, ORIGIN, KB0)
    batch = warp_gaussians(small_scene.means[:1], small_scene.rotations[:1], small_scene.scales[:1], ORIGIN, KB0)
    np.testing.assert_allclose(single.means, batch.means)
    np.testing.assert_allclose(single.scales, batch.scales)


def test_no_stretch_keeps_scales(small_scene):
    warped = warp_gaussians(small_scene.means, small_scene.rotations, small_scene.scales, ORIGIN, KB0,
                            WarpOptions.no_stretch())
    np.testing.assert_array_equal(warped.scales, small_scene.scales)
    assert warped.covariances is None


# ---------------------------------------------------------------------------
# reverse mode
# ---------------------------------------------------------------------------

def _warp_loss(means, rotations, log_scales, pose, cam, options, gm, gq, gs):
    w = warp_gaussians(means, rotations, np.exp(log_scales), pose, cam, options)
    return float(np.sum(gm * w.means) + np.sum(gq * w.rotations) + np.sum(gs * w.scales))


@pytest.mark.parametrize("options", [
    WarpOptions(),
    WarpOptions(order=2),
    WarpOptions.no_stretch(),
    WarpOptions(stretch_tangential=True, stretch_polar=False),
    WarpOptions(stretch_tangential=False, stretch_polar=True, order=2),
])
def test_warp_vjp_matches_finite_differences(options, rng):
    cam = mei_camera(64, 64, 1.0, 0.7)
    pose = CameraPose.look_at([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], up=(0.0, -1.0, 0.0))
    means = in_fov_means(rng, cam, pose, 6, near=3.0, far=6.0)
    n = len(means)
    rotations = random_rotations(rng, n)
    log_scales = np.log(np.array([0.3, 0.15, 0.05])) + rng.uniform(-0.2, 0.2, (n, 3))
    gm, gq, gs = rng.normal(size=(n, 3)), rng.normal(size=(n, 4)), rng.normal(size=(n, 3))

    warped = warp_gaussians(means, rotations, np.exp(log_scales), pose, cam, options)
    g_means, g_rot, g_log = warp_vjp(warped, gm, gq, gs)

    h = 1e-6
    args = [means, rotations, log_scales]
    for which, analytic in enumerate((g_means, g_rot, g_log)):
        base = args[which]
        for i in range(n):
            for j in range(base.shape[1]):
                plus = [a.copy() for a in args]
                minus = [a.copy() for a in args]
                plus[which][i, j] += h
                minus[which][i, j] -= h
                fd = (_warp_loss(*plus, pose, cam, options, gm, gq, gs)
                      - _warp_loss(*minus, pose, cam, options, gm, gq, gs)) / (2 * h)
                assert analytic[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-6), (which, i, j)


def test_no_stretch_log_scale_gradient_is_pass_through(small_scene, rng):
    warped = warp_gaussians(small_scene.means, small_scene.rotations, small_scene.scales, ORIGIN, KB0,
                            WarpOptions.no_stretch())
    gs = rng.normal(size=(len(small_scene), 3))
    _, _, g_log = warp_vjp(warped, np.zeros((len(small_scene), 3)), np.zeros((len(small_scene), 4)), gs)
    np.testing.assert_allclose(g_log, gs * small_scene.scales)


def test_identity_warp_passes_gradients(small_scene, pinhole_32, rng):
    warped = warp_gaussians(small_scene.means, small_scene.rotations, small_scene.scales, ORIGIN, pinhole_32)
    gm, gq = rng.normal(size=(30, 3)), rng.normal(size=(30, 4))
    g_means, g_rot, _ = warp_vjp(warped, gm, gq, np.zeros((30, 3)))
    np.testing.assert_array_equal(g_means, gm)
    np.testing.assert_array_equal(g_rot, gq)


def test_warped_depth_scale(pinhole_32, mei_32):
    np.testing.assert_array_equal(warped_depth_scale(pinhole_32), np.ones((32, 32)))
    scale = warped_depth_scale(mei_32)
    assert scale.shape == (32, 32)
    assert np.all(scale >= 0.0)
    # near the principal point the warp is the identity
    c = int(round(mei_32.u0))
    assert scale[c, c] == pytest.approx(1.0, abs=1e-2)

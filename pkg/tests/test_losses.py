import math

import numpy as np
import pytest
from scipy.special import log_softmax

from fisheye_splat.core.evaluation import ssim
from fisheye_splat.core.gaussian_core import GaussianSet, logit
from fisheye_splat.core.losses import (
    LossBreakdown,
    compute_depth_loss,
    compute_image_loss,
    compute_normal_loss,
    compute_reg_loss,
    compute_semantic_loss,
    depth_loss_and_grad,
    depth_to_normals,
    image_loss_and_grad,
    normal_loss_and_grad,
    reg_loss_and_grad,
    semantic_loss_and_grad,
)
from fisheye_splat.core.synthetic import pinhole_camera


def fd_check(fn, x, grad, n_checks=12, h=1e-6, rng=None, atol=1e-7):
    rng = rng or np.random.default_rng(0)
    flat = x.reshape(-1)
    for j in rng.choice(flat.size, size=min(n_checks, flat.size), replace=False):
        plus, minus = flat.copy(), flat.copy()
        plus[j] += h
        minus[j] -= h
        fd = (fn(plus.reshape(x.shape)) - fn(minus.reshape(x.shape))) / (2 * h)
        assert grad.reshape(-1)[j] == pytest.approx(fd, rel=1e-4, abs=atol)


# ---------------------------------------------------------------------------
# image
# ---------------------------------------------------------------------------

def test_image_loss_examples(rng):
    img = rng.uniform(0.2, 0.8, (24, 24, 3))
    assert compute_image_loss(img, img) == pytest.approx(0.0, abs=1e-12)
    shifted = img + 0.1
    expected = 0.8 * 0.1 + 0.2 * 0.5 * (1.0 - ssim(img, shifted))
    assert compute_image_loss(img, shifted) == pytest.approx(expected, rel=1e-9)
    assert compute_image_loss(img, shifted, lambda_rgb=0.0) == pytest.approx(0.1, rel=1e-9)
    with pytest.raises(ValueError):
        compute_image_loss(img, img[:10])


def test_image_loss_gradient(rng):
    a = rng.uniform(0.1, 0.9, (20, 20, 3))
    b = rng.uniform(0.1, 0.9, (20, 20, 3))
    _, grad = image_loss_and_grad(a, b)
    fd_check(lambda x: compute_image_loss(x, b), a, grad, rng=rng)


# ---------------------------------------------------------------------------
# depth
# ---------------------------------------------------------------------------

def test_depth_loss_examples(rng):
    render = rng.uniform(1.0, 10.0, (16, 16))
    assert compute_depth_loss(render, mono_depth=2.0 * render + 3.0) == pytest.approx(0.0, abs=1e-12)
    mask = rng.uniform(size=(16, 16)) < 0.3
    lidar = np.where(mask, render, 0.0)
    assert compute_depth_loss(render, lidar, mask) == pytest.approx(0.0)
    assert compute_depth_loss(np.full((16, 16), 4.0), mono_depth=render) == pytest.approx(1.0)
    assert compute_depth_loss(render) == 0.0


def test_empty_lidar_mask_contributes_zero(rng):
    render = rng.uniform(1.0, 10.0, (8, 8))
    value, grad = depth_loss_and_grad(render, np.zeros((8, 8)), np.zeros((8, 8), dtype=bool))
    assert value == 0.0
    assert not grad.any()


def test_lidar_depth_is_masked_l1(rng):
    render = rng.uniform(1.0, 10.0, (10, 10))
    lidar = render + 0.5
    mask = np.zeros((10, 10), dtype=bool)
    mask[::3] = True
    lidar[~mask] = 100.0
    assert compute_depth_loss(render, lidar, mask) == pytest.approx(0.5)


def test_depth_gradient(rng):
    render = rng.uniform(1.0, 10.0, (12, 12))
    lidar = rng.uniform(1.0, 10.0, (12, 12))
    mask = rng.uniform(size=(12, 12)) < 0.5
    mono = render ** 2 + rng.normal(size=(12, 12))
    _, grad = depth_loss_and_grad(render, lidar, mask, mono)
    fd_check(lambda x: compute_depth_loss(x, lidar, mask, mono), render, grad, rng=rng)


# ---------------------------------------------------------------------------
# semantics
# ---------------------------------------------------------------------------

def test_semantic_loss_examples():
    labels = np.array([[0, 1], [2, 1]])
    one_hot = np.eye(3)[labels] * 100.0
    assert compute_semantic_loss(one_hot, labels) == pytest.approx(0.0, abs=1e-12)
    assert compute_semantic_loss(np.zeros((2, 2, 3)), labels) == pytest.approx(0.01 * math.log(3))


def test_semantic_loss_matches_log_softmax(rng):
    logits = rng.normal(scale=3.0, size=(9, 7, 4))
    labels = rng.integers(0, 4, (9, 7))
    labels[0, :3] = 255
    valid = labels != 255
    expected = -np.mean(log_softmax(logits, axis=2)[valid, labels[valid]]) * 0.01
    assert compute_semantic_loss(logits, labels) == pytest.approx(expected, abs=1e-9)
    _, grad = semantic_loss_and_grad(logits, labels)
    assert not grad[0, :3].any()
    fd_check(lambda x: compute_semantic_loss(x, labels), logits, grad, rng=rng, atol=1e-10)


def test_semantic_without_labels():
    value, grad = semantic_loss_and_grad(np.zeros((3, 3, 2)), np.full((3, 3), 255))
    assert value == 0.0 and not grad.any()


# ---------------------------------------------------------------------------
# normals
# ---------------------------------------------------------------------------

def test_normal_loss_examples(rng):
    n = rng.normal(size=(6, 6, 3))
    n /= np.linalg.norm(n, axis=2, keepdims=True)
    assert compute_normal_loss(n, n) == pytest.approx(0.0, abs=1e-12)
    assert compute_normal_loss(-n, n) == pytest.approx(2.0)
    valid = np.zeros((6, 6), dtype=bool)
    assert compute_normal_loss(-n, n, valid) == 0.0


def test_normal_loss_gradient(rng):
    n_p = rng.normal(size=(5, 5, 3))
    n_d = rng.normal(size=(5, 5, 3))
    n_d /= np.linalg.norm(n_d, axis=2, keepdims=True)
    _, grad = normal_loss_and_grad(n_p, n_d)
    fd_check(lambda x: compute_normal_loss(x, n_d), n_p, grad, rng=rng)


def test_plane_normals_from_depth():
    cam = pinhole_camera(40, 30, 70.0)
    normal = np.array([0.3, -0.2, 1.0])
    normal /= np.linalg.norm(normal)
    d = 5.0
    ys, xs = np.mgrid[0:30, 0:40].astype(np.float64)
    rays = np.stack([(xs - cam.u0) / cam.fx, (ys - cam.v0) / cam.fy, np.ones_like(xs)], axis=2)
    depth = d / (rays @ normal)
    normals, valid = depth_to_normals(depth, cam)
    assert valid[1:-1, 1:-1].all()
    assert not valid[0].any() and not valid[:, -1].any()
    # camera facing: opposite to the plane normal pointing away from the camera
    cos = normals[valid] @ -normal
    assert np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))).max() < 1.0


def test_normals_skip_holes():
    depth = np.full((8, 8), 3.0)
    depth[4, 4] = 0.0
    _, valid = depth_to_normals(depth, pinhole_camera(8, 8))
    assert not valid[4, 4] and not valid[3, 4] and not valid[4, 5]
    assert valid[2, 2]


# ---------------------------------------------------------------------------
# regularization and breakdown
# ---------------------------------------------------------------------------

def test_reg_loss_examples():
    g = GaussianSet.empty(10, 0)
    g.opacity_logits[:] = logit(0.5)
    g.log_scales[:] = math.log(0.2)
    value, grad = reg_loss_and_grad(g)
    assert value == pytest.approx(0.01 * 0.7)
    # d/d(opacity) = 0.01 / N, carried through the sigmoid
    np.testing.assert_allclose(grad.opacity_logits, 0.01 / 10 * 0.25)
    np.testing.assert_allclose(grad.log_scales, 0.01 / 30 * 0.2)
    with pytest.raises(ValueError):
        compute_reg_loss(GaussianSet.empty(0, 0))


def test_breakdown_total():
    b = LossBreakdown(rgb_pinhole=0.1, rgb_fisheye=0.2, depth=0.3, semantic=0.01, normal=0.05, reg=0.002)
    assert "lidar" not in b.terms()
    assert b.total == pytest.approx(0.662, abs=1e-9)
    b.lidar = 0.4
    assert b.total == pytest.approx(1.062, abs=1e-9)

import numpy as np
import pytest
from plyfile import PlyData, PlyElement

from fisheye_splat.core.errors import SchemaError
from fisheye_splat.core.gaussian_core import GaussianSet
from fisheye_splat.core.ply_io import (
    gaussian_attributes,
    read_gaussian_ply,
    read_point_cloud,
    write_gaussian_ply,
    write_point_cloud,
)
from fisheye_splat.core.synthetic import random_gaussians


def test_attribute_layout():
    names = gaussian_attributes(2)
    assert names[:6] == ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    assert names[6] == "f_rest_0" and names[6 + 44] == "f_rest_44"
    assert names[-3:] == ["semantic_0", "semantic_1", "intensity"]
    assert len(names) == 3 + 3 + 45 + 1 + 3 + 4 + 2 + 1


def test_double_precision_round_trip_is_exact(tmp_path, rng):
    g = random_gaussians(25, rng, num_classes=3)
    path = tmp_path / "g.ply"
    write_gaussian_ply(path, g, precision="f8")
    back = read_gaussian_ply(path)
    for name in ("means", "rotations", "log_scales", "opacity_logits", "sh", "semantic_logits", "intensity_logits"):
        np.testing.assert_array_equal(getattr(back, name), getattr(g, name))


def test_single_precision_round_trip(tmp_path, rng):
    g = random_gaussians(10, rng)
    path = tmp_path / "g32.ply"
    write_gaussian_ply(path, g)
    back = read_gaussian_ply(path)
    np.testing.assert_allclose(back.means, g.means, rtol=1e-6)
    np.testing.assert_allclose(back.sh, g.sh, atol=1e-6)
    assert back.num_classes == 0


def test_rest_coefficients_are_channel_major(tmp_path, rng):
    g = random_gaussians(3, rng)
    path = tmp_path / "g.ply"
    write_gaussian_ply(path, g, precision="f8")
    vertex = PlyData.read(str(path))["vertex"].data
    np.testing.assert_array_equal(vertex["f_rest_0"], g.sh[:, 1, 0])
    np.testing.assert_array_equal(vertex["f_rest_14"], g.sh[:, 15, 0])
    np.testing.assert_array_equal(vertex["f_rest_15"], g.sh[:, 1, 1])
    np.testing.assert_array_equal(vertex["f_rest_44"], g.sh[:, 15, 2])


def test_empty_set_round_trip(tmp_path):
    path = tmp_path / "empty.ply"
    write_gaussian_ply(path, GaussianSet.empty(0, 2), precision="f8")
    back = read_gaussian_ply(path)
    assert len(back) == 0
    assert back.num_classes == 2


def test_missing_property_is_a_schema_error(tmp_path):
    vertices = np.zeros(2, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4")])
    path = tmp_path / "points_only.ply"
    PlyData([PlyElement.describe(vertices, "vertex")]).write(str(path))
    with pytest.raises(SchemaError, match="f_dc_0"):
        read_gaussian_ply(path)


def test_unreadable_files(tmp_path):
    with pytest.raises(SchemaError, match="not found"):
        read_gaussian_ply(tmp_path / "nope.ply")
    bad = tmp_path / "bad.ply"
    bad.write_text("definitely not a ply file")
    with pytest.raises(SchemaError):
        read_gaussian_ply(bad)


def test_point_cloud_round_trip(tmp_path, rng):
    points = rng.normal(size=(50, 3))
    colors = rng.uniform(0.0, 1.0, (50, 3))
    intensity = rng.uniform(0.0, 1.0, 50)
    path = tmp_path / "pc.ply"
    write_point_cloud(path, points, colors, intensity)
    p, c, i = read_point_cloud(path)
    np.testing.assert_allclose(p, points, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(c, colors, atol=0.5 / 255.0 + 1e-9)
    np.testing.assert_allclose(i, intensity, atol=1e-6)

    write_point_cloud(path, points)
    _, c, i = read_point_cloud(path)
    assert c is None and i is None

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mv3d.geometry import (ROI, CameraIntrinsics, Coords3D, DepthSpec, FrameError, GeometryError, RigidTransform,
                           align_coords, camera_pose, make_frustum_grid, normalize_coords, random_rotation,
                           random_transform, relative_lidar_transform, rot_z, unproject_to_lidar)

seeds = st.integers(0, 2 ** 31 - 1)


def _chain(rng, t="t", p="p"):
    return (random_transform(rng, f"lidar@{t}", f"ego@{t}"), random_transform(rng, f"ego@{t}", "global"),
            random_transform(rng, f"lidar@{p}", f"ego@{p}"), random_transform(rng, f"ego@{p}", "global"))


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_relative_transform_matches_global_round_trip(seed):
    rng = np.random.default_rng(seed)
    l2e_t, e2g_t, l2e_p, e2g_p = _chain(rng)
    rel = relative_lidar_transform(l2e_t, e2g_t, l2e_p, e2g_p)
    pts = rng.normal(0, 20, (16, 3))
    world = e2g_p.apply(l2e_p.apply(pts))
    # oracle: solve the current-frame chain with a linear solve instead of inverting transforms
    m = e2g_t.matrix @ l2e_t.matrix
    direct = np.linalg.solve(m[:3, :3], (world - m[:3, 3]).T).T
    np.testing.assert_allclose(rel.apply(pts), direct, atol=1e-9)
    assert (rel.src, rel.dst) == ("lidar@p", "lidar@t")


def test_relative_transform_identity_when_poses_coincide():
    rng = np.random.default_rng(3)
    l2e, e2g = random_transform(rng, "lidar@0", "ego@0"), random_transform(rng, "ego@0", "global")
    rel = relative_lidar_transform(l2e, e2g, l2e.relabel("lidar@1", "ego@1"), e2g.relabel("ego@1", "global"))
    np.testing.assert_allclose(rel.matrix, np.eye(4), atol=1e-12)


def test_frame_mismatch_raises():
    rng = np.random.default_rng(0)
    l2e_t, e2g_t, l2e_p, e2g_p = _chain(rng)
    with pytest.raises(FrameError):
        relative_lidar_transform(l2e_t, e2g_p, l2e_p, e2g_p)
    with pytest.raises(FrameError):
        l2e_t @ l2e_p


def test_non_orthonormal_rotation_rejected():
    m = np.eye(4)
    m[0, 0] = 1.001
    with pytest.raises(GeometryError):
        RigidTransform(m, "a", "b")
    m = np.eye(4)
    m[:3, :3] = np.diag([1, 1, -1])
    with pytest.raises(GeometryError):
        RigidTransform(m, "a", "b")


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_inverse_and_compose(seed):
    rng = np.random.default_rng(seed)
    a = random_transform(rng, "x", "y")
    b = random_transform(rng, "y", "z")
    np.testing.assert_allclose((a.inverse() @ a).matrix, np.eye(4), atol=1e-12)
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose((b @ a).apply(p), b.apply(a.apply(p)), atol=1e-10)
    r = random_rotation(rng)
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert math.isclose(np.linalg.det(r), 1.0, abs_tol=1e-12)


def test_frustum_grid_pixel_centres():
    g = make_frustum_grid(3, 2, 16, DepthSpec(1.0, 4.0, 4))
    px = g.pixels()
    assert px.shape == (2, 3, 2)
    np.testing.assert_allclose(px[0, 0], [8.0, 8.0])
    np.testing.assert_allclose(px[1, 2], [40.0, 24.0])
    np.testing.assert_allclose(g.depths, [1, 2, 3, 4])
    assert g.points.shape == (2 * 3 * 4, 4)


def test_depth_modes():
    lin = DepthSpec(1.0, 60.0, 64).depths()
    assert lin[0] == 1.0 and lin[-1] == 60.0
    lid = DepthSpec(1.0, 60.0, 64, "lid").depths()
    widths = np.diff(lid)
    assert lid[0] == 1.0 and math.isclose(lid[-1], 60.0)
    np.testing.assert_allclose(np.diff(widths), widths[1] - widths[0], rtol=1e-9)
    with pytest.raises(GeometryError):
        DepthSpec(5.0, 1.0, 4).depths()
    with pytest.raises(GeometryError):
        make_frustum_grid(2, 2, 16, [1.0, 1.0])


def _camera(yaw=0.3, pitch=0.05, pos=(0.5, -0.2, 1.6), name="camera0"):
    return RigidTransform.from_rt(camera_pose(yaw, pos, pitch), pos, name, "lidar")


def test_unproject_reproject_round_trip():
    intr = CameraIntrinsics.from_pinhole(96.0, 96.0, 96.0, 48.0)
    c2l = _camera()
    grid = make_frustum_grid(12, 6, 16)
    pts = unproject_to_lidar(grid, intr, c2l).points.reshape(-1, 3)
    uv, depth = intr.project(c2l.inverse().apply(pts))
    np.testing.assert_allclose(uv, grid.points[:, :2] / grid.points[:, 2:3], atol=1e-9)
    np.testing.assert_allclose(depth, grid.points[:, 2], atol=1e-9)


def test_unprojected_rays_hit_depth_along_optical_axis():
    intr = CameraIntrinsics.from_pinhole(100.0, 100.0, 8.0, 8.0)
    c2l = _camera(yaw=0.0, pitch=0.0, pos=(0.0, 0.0, 0.0))
    grid = make_frustum_grid(1, 1, 16, [2.0, 5.0])
    pts = unproject_to_lidar(grid, intr, c2l).points.reshape(-1, 3)
    # the single cell centre is the principal point, so points lie on the forward (x) axis
    np.testing.assert_allclose(pts, [[2.0, 0, 0], [5.0, 0, 0]], atol=1e-12)


def test_camera_pose_axes():
    r = camera_pose(math.pi / 2, (0, 0, 0))
    np.testing.assert_allclose(r[:, 2], [0, 1, 0], atol=1e-12)  # looks along +y
    np.testing.assert_allclose(r[:, 1], [0, 0, -1], atol=1e-12)  # image down is world down


def test_align_static_points():
    rng = np.random.default_rng(7)
    intr = CameraIntrinsics.from_pinhole(96.0, 96.0, 96.0, 48.0)
    l2e = RigidTransform.from_rt(np.eye(3), [0.9, 0, 1.8], "lidar@0", "ego@0")
    e2g_p = RigidTransform.from_rt(rot_z(0.2), [10.0, 5.0, 0.0], "ego@0", "global")
    e2g_t = RigidTransform.from_rt(rot_z(0.35), [14.0, 6.5, 0.0], "ego@1", "global")
    l2e_t = l2e.relabel("lidar@1", "ego@1")
    c2l = _camera(name="camera0").relabel("camera0", "lidar@0")
    grid = make_frustum_grid(12, 6, 16)
    prev = unproject_to_lidar(grid, intr, c2l)
    rel = relative_lidar_transform(l2e_t, e2g_t, l2e, e2g_p)
    aligned = align_coords(prev, rel)
    world = e2g_p.apply(l2e.apply(prev.points.reshape(-1, 3)))
    direct = (e2g_t @ l2e_t).inverse().apply(world)
    assert np.abs(aligned.points.reshape(-1, 3) - direct).max() < 1e-6
    ego_disp = np.linalg.norm(e2g_t.translation - e2g_p.translation)
    assert np.abs(prev.points.reshape(-1, 3) - direct).max() > ego_disp
    with pytest.raises(FrameError):
        align_coords(Coords3D(prev.points, "lidar@9"), rel)
    del rng


def test_normalize_coords_examples():
    roi = ROI()
    pts = np.array([[0.0, 0, 0], [-61.2, -61.2, -10], [61.2, 61.2, 10], [62.2, 0, 0]])
    n = normalize_coords(Coords3D(pts, "lidar"), roi)
    np.testing.assert_allclose(n.points[0], [0.5, 0.5, 0.5])
    np.testing.assert_allclose(n.points[1], [0, 0, 0])
    np.testing.assert_allclose(n.points[2], [1, 1, 1])
    np.testing.assert_allclose(n.points[3], [1, 0.5, 0.5])
    assert n.mask.tolist() == [True, True, True, False]
    with pytest.raises(GeometryError):
        ROI(1, 1, 0, 1, 0, 1)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3))
def test_normalize_in_unit_cube(p):
    n = normalize_coords(Coords3D(np.array([p]), "lidar"), ROI())
    assert np.all((n.points >= 0) & (n.points <= 1))
    assert n.mask[0] == ROI().contains(np.array(p))

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import binary_dilation

from mv3d.geometry import ROI, Coords3D, align_coords, relative_lidar_transform
from mv3d.pgm import read_pgm, write_pgm
from mv3d.scene import (CLASS_SIZES, SceneConfig, SceneConfigError, bev_gt, box_corners, crafted_scene, dataset_hash,
                        generate_scene, load_dataset, rasterize_footprints, render_views, sample_prev_frame,
                        scene_from_manifest, scene_manifest, write_dataset, Boxes)

CFG = SceneConfig()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_generated_scene_invariants(seed):
    seq = generate_scene(CFG, seed)
    o = seq.objects
    assert np.all(o.size > 0)
    assert np.all(np.linalg.norm(o.velocity, axis=1) <= CFG.max_speed + 1e-12)
    assert CFG.roi_box.contains(seq.boxes(0).center).all()
    k = 17
    expect = o.center0.copy()
    expect[:, :2] += o.velocity * k * CFG.sweep_interval
    np.testing.assert_allclose(seq.object_centers_global(k), expect, atol=1e-9)


def test_generation_is_deterministic():
    a, b = generate_scene(CFG, 42), generate_scene(CFG, 42)
    assert json.dumps(scene_manifest(a)) == json.dumps(scene_manifest(b))
    assert json.dumps(scene_manifest(a)) != json.dumps(scene_manifest(generate_scene(CFG, 43)))


def test_manifest_round_trip():
    seq = generate_scene(CFG, 5)
    back = scene_from_manifest(json.loads(json.dumps(scene_manifest(seq))))
    np.testing.assert_array_equal(render_views(seq, 12), render_views(back, 12))


def _front_object(depth, cam=0, cls=0, cfg=CFG):
    # camera 0 looks along +y; put the centre on its optical axis at the camera height
    seq0 = crafted_scene(cfg, [], np.zeros((0, 3)))
    cam_pos = seq0.lidar_to_global(0).apply(seq0.rig.cam_to_lidar[cam].translation[None])[0]
    fwd = seq0.lidar_to_global(0).rotation @ seq0.rig.cam_to_lidar[cam].rotation[:, 2]
    centre = cam_pos + depth * fwd
    return crafted_scene(cfg, [cls], [centre], yaws=[0.0])


def test_principal_ray_object_hits_image_centre():
    seq = _front_object(10.0)
    img = render_views(seq, 0)[0]
    h, w = img.shape
    assert img[h // 2, w // 2] > 0
    ys, xs = np.nonzero(img)
    assert abs(xs.mean() + 0.5 - w / 2) < 1.0 and abs(ys.mean() + 0.5 - h / 2) < 1.0
    assert render_views(seq, 0)[1].max() == 0  # the other camera looks away


def test_footprint_shrinks_with_depth():
    areas = [np.count_nonzero(render_views(_front_object(d), 0)[0]) for d in (5.0, 10.0, 20.0, 40.0)]
    assert all(a > b for a, b in zip(areas, areas[1:]))
    # projective-scaling oracle: doubling depth quarters the area (rasterisation slack at small sizes)
    for a, b in zip(areas, areas[1:]):
        assert 3.0 < a / b < 5.5


def _ray_hits_box(origin, dirs, center, size, yaw):
    """Slab test in the box frame for many rays."""
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    o = (origin - center) @ rot
    d = dirs @ rot
    half = np.array([size[2], size[0], size[1]]) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    return (tmax >= np.maximum(tmin, 0))


def test_rendered_pixels_lie_on_object_rays():
    cfg = CFG
    seq = crafted_scene(cfg, [1], [[3.0, 12.0, 1.5]], yaws=[0.4])
    img = render_views(seq, 0)[0]
    rig = seq.rig
    l2g = seq.lidar_to_global(0)
    c2g = l2g @ rig.cam_to_lidar[0].relabel("camera0", "lidar@0")
    u, v = np.meshgrid(np.arange(rig.image_w) + 0.5, np.arange(rig.image_h) + 0.5)
    pix = np.stack([u.ravel(), v.ravel(), np.ones(u.size)], axis=1)
    dirs_cam = pix @ np.linalg.inv(rig.intrinsics[0].K[:3, :3]).T
    dirs = dirs_cam @ c2g.rotation.T
    hit = _ray_hits_box(c2g.translation, dirs, seq.objects.center0[0], seq.objects.size[0],
                        seq.objects.yaw[0]).reshape(img.shape)
    painted = img > 0
    assert painted.sum() > 50
    mismatch = painted ^ hit
    # every disagreement sits within one pixel of the other set's boundary
    assert not (mismatch & ~binary_dilation(hit) & painted).any()
    assert not (mismatch & ~binary_dilation(painted) & hit).any()


def test_nearer_object_occludes():
    cfg = CFG
    far = _front_object(20.0, cls=1)
    near = _front_object(8.0, cls=0)
    both = crafted_scene(cfg, [1, 0], np.vstack([far.objects.center0, near.objects.center0]))
    img = render_views(both, 0)[0]
    h, w = img.shape
    assert img[h // 2, w // 2] == 0.5  # car intensity wins at the centre


def test_static_points_align_across_sweeps():
    seq = crafted_scene(CFG, [0], [[0.0, 10.0, 0.8]], ego_speed=8.0)
    t, p = 30, 15
    rel = relative_lidar_transform(seq.lidar_to_ego_at(t), seq.ego_to_global[t],
                                   seq.lidar_to_ego_at(p), seq.ego_to_global[p])
    prev = Coords3D(seq.boxes(p).center[None, None, None], f"lidar@{p}")
    aligned = align_coords(prev, rel).points.reshape(-1, 3)
    np.testing.assert_allclose(aligned, seq.boxes(t).center, atol=1e-9)


def test_bev_footprint_pixel_count():
    roi = ROI()
    b = Boxes(np.array([0]), np.zeros((1, 3)), np.array([[2.0, 1.5, 4.0]]), np.zeros(1), np.zeros((1, 2)),
              np.zeros(1, int))
    fp = rasterize_footprints(b, roi, 256)
    expect = (4 / 122.4 * 256) * (2 / 122.4 * 256)
    assert abs(fp.sum() - expect) <= 8
    rows, cols = np.nonzero(fp)
    assert rows.max() - rows.min() + 1 in (8, 9) and cols.max() - cols.min() + 1 in (4, 5)


def test_bev_gt_channels():
    seq = generate_scene(CFG, 3)
    m = bev_gt(seq, 12, 64)
    assert m.shape == (3, 64, 64)
    assert set(np.unique(m)) <= {0.0, 1.0}
    assert np.all(m[1] <= m[0])  # lane markings lie on drivable area


def test_prev_frame_sampling():
    assert sample_prev_frame(20, "infer") == (5, False)
    assert sample_prev_frame(2, "infer") == (0, True)
    rng = np.random.default_rng(0)
    offs = {30 - sample_prev_frame(30, "train", rng)[0] for _ in range(2000)}
    assert offs == set(range(3, 28))
    with pytest.raises(ValueError):
        sample_prev_frame(3, "train")
    with pytest.raises(ValueError):
        sample_prev_frame(3, "eval")


def test_config_validation():
    with pytest.raises(SceneConfigError):
        SceneConfig(image_w=100)
    with pytest.raises(SceneConfigError):
        SceneConfig(x_range=80.0)
    with pytest.raises(SceneConfigError):
        crafted_scene(CFG, [0], [[0, 5, 1]], velocities=[[40.0, 0.0]])


def test_box_corners_extent():
    c = box_corners([0, 0, 0], CLASS_SIZES[0], 0.0)[0]
    np.testing.assert_allclose(c.max(axis=0) - c.min(axis=0), [4.5, 1.9, 1.6])


def test_dataset_round_trip(tmp_path):
    small = SceneConfig(n_sweeps=7)
    write_dataset(tmp_path / "a", small, 2, seed=3)
    write_dataset(tmp_path / "b", small, 2, seed=3)
    assert dataset_hash(tmp_path / "a") == dataset_hash(tmp_path / "b")
    scenes = load_dataset(tmp_path / "a")
    assert len(scenes) == 2
    img = read_pgm(tmp_path / "a" / "scene_0000" / "img_s06_c0.pgm")
    np.testing.assert_allclose(img, render_views(scenes[0], 6)[0], atol=1 / 255)
    with pytest.raises(SceneConfigError):
        write_dataset(tmp_path / "c", small, 0, seed=0)


def test_pgm_round_trip(tmp_path):
    a = np.random.default_rng(0).uniform(size=(5, 7))
    write_pgm(tmp_path / "x.pgm", a)
    np.testing.assert_allclose(read_pgm(tmp_path / "x.pgm"), a, atol=0.5 / 255 + 1e-12)

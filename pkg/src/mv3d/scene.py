"""Synthetic multi-camera driving scenes.

A scene is a short drive: the ego vehicle follows a smooth arc with constant
speed and yaw rate, surrounding vehicles move with constant velocity in the
global frame, and a ring of pinhole cameras is rigidly attached to the lidar.
Images are class-coded silhouettes; BEV ground truth has three channels
(drivable, lane, vehicle).

BEV raster convention: row ``r`` covers lidar x around
``xmin + (r + 0.5) * res`` and column ``c`` covers y around
``ymin + (c + 0.5) * res``, with ``res = extent / map_size``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from shapely.geometry import MultiPoint
from skimage.draw import polygon as fill_polygon

from .geometry import ROI, CameraIntrinsics, RigidTransform, camera_pose, rot_z
from .pgm import write_pgm

log = logging.getLogger(__name__)

CLASS_NAMES = ("car", "truck")
# (width, height, length) in metres
CLASS_SIZES = np.array([[1.9, 1.6, 4.5], [2.5, 3.0, 8.0]])
CLASS_INTENSITY = np.array([0.5, 1.0])
VEHICLE_CLASSES = (0, 1)
BEV_CLASSES = ("drivable", "lane", "vehicle")

LIDAR_HEIGHT = 1.8
TRAIN_OFFSETS = (3, 27)
INFER_OFFSET = 15


class SceneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    n_sweeps: int = 40
    sweep_interval: float = 0.083
    keyframe_every: int = 6
    n_cams: int = 2
    image_w: int = 192
    image_h: int = 96
    fov_deg: float = 90.0
    cam_height: float = 1.6
    n_objects: tuple = (4, 8)
    # placement window relative to the ego at the anchor sweep: |x| <= x_range, y_range[0] <= |y| <= y_range[1]
    x_range: float = 20.0
    y_range: tuple = (6.0, 24.0)
    static_fraction: float = 0.3
    speed_range: tuple = (3.0, 12.0)
    max_speed: float = 15.0
    ego_speed_range: tuple = (2.0, 12.0)
    ego_yaw_rate_range: tuple = (-0.08, 0.08)
    road_half_width: float = 10.0
    lane_offsets: tuple = (0.0, 3.5, 7.0)
    lane_half_width: float = 0.3
    roi: tuple = tuple(ROI().to_list())

    def __post_init__(self):
        if self.n_sweeps < 1 or self.n_cams < 1:
            raise SceneConfigError("need at least one sweep and one camera")
        if self.sweep_interval <= 0:
            raise SceneConfigError("sweep interval must be positive")
        lo, hi = self.n_objects
        if lo < 0 or hi < lo:
            raise SceneConfigError(f"bad object count range {self.n_objects}")
        if self.image_w % 16 or self.image_h % 16:
            raise SceneConfigError("image size must be a multiple of 16")
        if not 0 < self.fov_deg < 180:
            raise SceneConfigError("fov must lie in (0, 180) degrees")
        if self.y_range[0] > self.y_range[1] or self.speed_range[1] > self.max_speed:
            raise SceneConfigError("inconsistent placement or speed ranges")
        roi = ROI.from_list(self.roi)
        if self.x_range > roi.xmax or self.y_range[1] > roi.ymax:
            raise SceneConfigError("placement window exceeds the region of interest")

    @property
    def roi_box(self) -> ROI:
        return ROI.from_list(self.roi)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        fields = cls.__dataclass_fields__
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in fields}
        return cls(**kw)


def default_cam_yaws(n: int) -> list[float]:
    """Headings of the camera ring; two cameras look left and right."""
    if n == 2:
        return [math.pi / 2, -math.pi / 2]
    return [2 * math.pi * i / n for i in range(n)]


@dataclass(frozen=True, eq=False)
class CameraRig:
    intrinsics: tuple
    cam_to_lidar: tuple  # RigidTransform "camera{i}" -> "lidar"
    image_w: int
    image_h: int

    @property
    def n_cams(self) -> int:
        return len(self.intrinsics)

    def extrinsics_at(self, sweep: int) -> list[RigidTransform]:
        return [t.relabel(f"camera{i}@{sweep}", f"lidar@{sweep}") for i, t in enumerate(self.cam_to_lidar)]

    def replace_extrinsic(self, cam: int, transform: RigidTransform) -> "CameraRig":
        ext = list(self.cam_to_lidar)
        ext[cam] = transform
        return CameraRig(self.intrinsics, tuple(ext), self.image_w, self.image_h)

    def subset(self, cams) -> "CameraRig":
        cams = list(cams)
        return CameraRig(tuple(self.intrinsics[i] for i in cams), tuple(self.cam_to_lidar[i] for i in cams),
                         self.image_w, self.image_h)


def make_rig(cfg: SceneConfig) -> CameraRig:
    f = (cfg.image_w / 2) / math.tan(math.radians(cfg.fov_deg) / 2)
    intr = CameraIntrinsics.from_pinhole(f, f, cfg.image_w / 2, cfg.image_h / 2)
    dz = cfg.cam_height - LIDAR_HEIGHT
    ext = []
    for i, yaw in enumerate(default_cam_yaws(cfg.n_cams)):
        pos = np.array([0.3 * math.cos(yaw), 0.3 * math.sin(yaw), dz])
        ext.append(RigidTransform.from_rt(camera_pose(yaw, pos), pos, f"camera{i}", "lidar"))
    return CameraRig(tuple([intr] * cfg.n_cams), tuple(ext), cfg.image_w, cfg.image_h)


@dataclass(eq=False)
class SceneObjects:
    cls: np.ndarray  # (N,) int
    center0: np.ndarray  # (N, 3) global at t=0
    size: np.ndarray  # (N, 3) w, h, l
    yaw: np.ndarray  # (N,) global heading
    velocity: np.ndarray  # (N, 2) global m/s

    def __len__(self):
        return len(self.cls)


@dataclass(frozen=True)
class Boxes:
    """Boxes expressed in one lidar frame."""

    cls: np.ndarray
    center: np.ndarray  # (N, 3) m
    size: np.ndarray  # (N, 3) w h l
    yaw: np.ndarray  # (N,) rad
    velocity: np.ndarray  # (N, 2) m/s, lidar axes
    ids: np.ndarray  # (N,) index into SceneObjects

    def __len__(self):
        return len(self.cls)

    def subset(self, keep) -> "Boxes":
        return Boxes(self.cls[keep], self.center[keep], self.size[keep], self.yaw[keep], self.velocity[keep], self.ids[keep])

    @classmethod
    def empty(cls) -> "Boxes":
        return cls(np.zeros(0, int), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 2)), np.zeros(0, int))


@dataclass(eq=False)
class SceneSequence:
    config: SceneConfig
    timestamps: np.ndarray
    ego_to_global: list  # RigidTransform ego@k -> global
    lidar_to_ego: RigidTransform  # "lidar" -> "ego", static
    rig: CameraRig
    objects: SceneObjects
    seed: int = 0

    @property
    def n_sweeps(self) -> int:
        return len(self.timestamps)

    @property
    def keyframes(self) -> list[int]:
        return list(range(0, self.n_sweeps, self.config.keyframe_every))

    def lidar_to_ego_at(self, k: int) -> RigidTransform:
        return self.lidar_to_ego.relabel(f"lidar@{k}", f"ego@{k}")

    def lidar_to_global(self, k: int) -> RigidTransform:
        return self.ego_to_global[k] @ self.lidar_to_ego_at(k)

    def object_centers_global(self, k: int) -> np.ndarray:
        t = self.timestamps[k] - self.timestamps[0]
        c = self.objects.center0.copy()
        c[:, :2] += self.objects.velocity * t
        return c

    def boxes(self, k: int) -> Boxes:
        """All objects in lidar@k."""
        g2l = self.lidar_to_global(k).inverse()
        centers = g2l.apply(self.object_centers_global(k))
        r = g2l.rotation
        heading = math.atan2(r[1, 0], r[0, 0])
        vel3 = np.concatenate([self.objects.velocity, np.zeros((len(self.objects), 1))], axis=1)
        vel = (vel3 @ r.T)[:, :2]
        yaw = wrap_angle(self.objects.yaw + heading)
        return Boxes(self.objects.cls.copy(), centers, self.objects.size.copy(), yaw, vel,
                     np.arange(len(self.objects)))

    def annotations(self, k: int, rig: CameraRig | None = None) -> Boxes:
        """Objects inside the ROI whose centre projects into at least one image."""
        b = self.boxes(k)
        if len(b) == 0:
            return b
        keep = self.config.roi_box.contains(b.center) & visible_mask(b.center, rig or self.rig)
        return b.subset(keep)


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def visible_mask(centers: np.ndarray, rig: CameraRig, cams=None) -> np.ndarray:
    vis = np.zeros(len(centers), dtype=bool)
    for i in cams if cams is not None else range(rig.n_cams):
        vis |= in_camera(centers, rig, i)
    return vis


def in_camera(points: np.ndarray, rig: CameraRig, cam: int) -> np.ndarray:
    pc = rig.cam_to_lidar[cam].inverse().apply(points)
    uv, d = rig.intrinsics[cam].project(pc)
    return (d >= 1.0) & (uv[:, 0] >= 0) & (uv[:, 0] < rig.image_w) & (uv[:, 1] >= 0) & (uv[:, 1] < rig.image_h)


def box_corners(center, size, yaw) -> np.ndarray:
    """``(N, 8, 3)`` corners of boxes with size (w, h, l) and heading ``yaw``."""
    center = np.atleast_2d(center)
    size = np.atleast_2d(size)
    yaw = np.atleast_1d(yaw)
    sx = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * 0.5
    sy = np.array([1, -1, 1, -1, 1, -1, 1, -1]) * 0.5
    sz = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * 0.5
    local = np.stack([sx[None] * size[:, 2:3], sy[None] * size[:, 0:1], sz[None] * size[:, 1:2]], axis=-1)
    c, s = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
    x = c * local[..., 0] - s * local[..., 1]
    y = s * local[..., 0] + c * local[..., 1]
    return np.stack([x, y, local[..., 2]], axis=-1) + center[:, None, :]


def _ego_trajectory(n, dt, speed, yaw_rate, heading0, substeps=20):
    """Poses at each sweep by fine integration of a unicycle model."""
    xs = np.zeros((n, 2))
    hs = np.zeros(n)
    p = np.zeros(2)
    h = heading0
    h_dt = dt / substeps
    for k in range(n):
        xs[k], hs[k] = p, h
        for _ in range(substeps):
            p = p + speed * h_dt * np.array([math.cos(h + 0.5 * yaw_rate * h_dt), math.sin(h + 0.5 * yaw_rate * h_dt)])
            h = h + yaw_rate * h_dt
    return xs, hs


def generate_scene(cfg: SceneConfig, seed: int, max_tries: int = 200) -> SceneSequence:
    """Deterministic scene for ``(cfg, seed)``."""
    rng = np.random.default_rng(seed)
    dt = cfg.sweep_interval
    ts = np.arange(cfg.n_sweeps) * dt
    speed = rng.uniform(*cfg.ego_speed_range)
    yaw_rate = rng.uniform(*cfg.ego_yaw_rate_range)
    heading0 = rng.uniform(-math.pi, math.pi)
    origin = rng.uniform(-100, 100, 2)
    pos, head = _ego_trajectory(cfg.n_sweeps, dt, speed, yaw_rate, heading0)
    pos = pos + origin
    ego = [RigidTransform.from_rt(rot_z(h), [p[0], p[1], 0.0], f"ego@{k}", "global")
           for k, (p, h) in enumerate(zip(pos, head))]
    lidar_to_ego = RigidTransform.from_rt(np.eye(3), [0.9, 0.0, LIDAR_HEIGHT], "lidar", "ego")

    roi = cfg.roi_box
    anchor = min(cfg.n_sweeps - 1, (3 * cfg.n_sweeps) // 4)
    a_pos, a_head = pos[anchor], head[anchor]
    ca, sa = math.cos(a_head), math.sin(a_head)
    t_anchor = ts[anchor]
    l2g0 = (ego[0] @ lidar_to_ego.relabel("lidar@0", "ego@0")).inverse()

    n_obj = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    cls, centers, sizes, yaws, vels = [], [], [], [], []
    tries = 0
    while len(cls) < n_obj:
        tries += 1
        if tries > max_tries * max(1, n_obj):
            raise SceneConfigError("could not place objects; placement window or ROI too small")
        c = int(rng.integers(len(CLASS_NAMES)))
        size = CLASS_SIZES[c] * rng.uniform(0.9, 1.1, 3)
        lx = rng.uniform(-cfg.x_range, cfg.x_range)
        ly = rng.uniform(*cfg.y_range) * rng.choice([-1.0, 1.0])
        direction = 1.0 if ly < 0 else -1.0  # keep-right traffic
        if rng.uniform() < cfg.static_fraction:
            v = 0.0
            rel_yaw = rng.choice([0.0, math.pi]) + rng.normal(0, 0.05)
        else:
            v = rng.uniform(*cfg.speed_range)
            rel_yaw = (0.0 if direction > 0 else math.pi) + rng.normal(0, 0.05)
        g_yaw = a_head + rel_yaw
        vel = v * np.array([math.cos(g_yaw), math.sin(g_yaw)])
        g_at_anchor = a_pos + np.array([ca * lx - sa * ly, sa * lx + ca * ly])
        g0 = g_at_anchor - vel * t_anchor
        center0 = np.array([g0[0], g0[1], size[1] / 2])
        if not roi.contains(l2g0.apply(center0[None]))[0]:
            continue
        if any(np.linalg.norm(g_at_anchor - (cc[:2] + vv * t_anchor)) < 0.5 * (size[2] + ss[2]) + 1.0
               for cc, ss, vv in zip(centers, sizes, vels)):
            continue
        cls.append(c)
        centers.append(center0)
        sizes.append(size)
        yaws.append(float(wrap_angle(g_yaw)))
        vels.append(vel)
    objects = SceneObjects(
        np.array(cls, dtype=int), np.array(centers).reshape(-1, 3), np.array(sizes).reshape(-1, 3),
        np.array(yaws, dtype=float), np.array(vels).reshape(-1, 2))
    return SceneSequence(cfg, ts, ego, lidar_to_ego, make_rig(cfg), objects, seed)


def crafted_scene(cfg: SceneConfig, cls, centers, sizes=None, yaws=None, velocities=None,
                  ego_speed: float = 0.0, seed: int = 0) -> SceneSequence:
    """Hand-placed scene: the ego starts at the global origin heading +x.

    ``centers`` are global positions at t=0 (z is the box centre height);
    sizes default to the class templates, yaws and velocities to zero.
    """
    cls = np.asarray(cls, dtype=int).reshape(-1)
    n = len(cls)
    centers = np.asarray(centers, dtype=np.float64).reshape(n, 3)
    sizes = CLASS_SIZES[cls] if sizes is None else np.asarray(sizes, dtype=np.float64).reshape(n, 3)
    yaws = np.zeros(n) if yaws is None else np.asarray(yaws, dtype=np.float64).reshape(n)
    vel = np.zeros((n, 2)) if velocities is None else np.asarray(velocities, dtype=np.float64).reshape(n, 2)
    if np.any(sizes <= 0):
        raise SceneConfigError("object sizes must be positive")
    if n and np.linalg.norm(vel, axis=1).max() > cfg.max_speed:
        raise SceneConfigError("object speed exceeds the configured maximum")
    ts = np.arange(cfg.n_sweeps) * cfg.sweep_interval
    ego = [RigidTransform.from_rt(np.eye(3), [ego_speed * t, 0.0, 0.0], f"ego@{k}", "global")
           for k, t in enumerate(ts)]
    lidar_to_ego = RigidTransform.from_rt(np.eye(3), [0.9, 0.0, LIDAR_HEIGHT], "lidar", "ego")
    objects = SceneObjects(cls, centers, sizes, yaws, vel)
    return SceneSequence(cfg, ts, ego, lidar_to_ego, make_rig(cfg), objects, seed)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def render_views(seq: SceneSequence, sweep_idx: int, rig: CameraRig | None = None) -> np.ndarray:
    """Silhouette images ``(n_cams, H, W)`` in [0, 1] for sweep ``sweep_idx``.

    Objects are painted far-to-near (painter's algorithm on centre depth) with
    their class intensity. Boxes with any corner closer than 0.1 m to the image
    plane are skipped.
    """
    if not 0 <= sweep_idx < seq.n_sweeps:
        raise IndexError(f"sweep {sweep_idx} outside [0, {seq.n_sweeps})")
    rig = rig or seq.rig
    b = seq.boxes(sweep_idx)
    images = np.zeros((rig.n_cams, rig.image_h, rig.image_w))
    if len(b) == 0:
        return images
    corners = box_corners(b.center, b.size, b.yaw)
    for i in range(rig.n_cams):
        l2c = rig.cam_to_lidar[i].inverse()
        cam_c = l2c.apply(corners)
        depth = l2c.apply(b.center)[:, 2]
        for j in np.argsort(-depth, kind="stable"):
            if cam_c[j, :, 2].min() < 0.1:
                continue
            uv, _ = rig.intrinsics[i].project(cam_c[j])
            hull = MultiPoint([tuple(p) for p in uv]).convex_hull
            if hull.geom_type != "Polygon":
                continue
            xs, ys = hull.exterior.coords.xy
            rr, cc = fill_polygon(np.asarray(ys) - 0.5, np.asarray(xs) - 0.5, shape=images.shape[1:])
            images[i, rr, cc] = CLASS_INTENSITY[b.cls[j]]
    return images


# ---------------------------------------------------------------------------
# BEV ground truth
# ---------------------------------------------------------------------------


def bev_cell_centers(roi: ROI, map_size: int) -> tuple[np.ndarray, np.ndarray]:
    xs = roi.xmin + (np.arange(map_size) + 0.5) * (roi.xmax - roi.xmin) / map_size
    ys = roi.ymin + (np.arange(map_size) + 0.5) * (roi.ymax - roi.ymin) / map_size
    return xs, ys


def rasterize_footprints(boxes: Boxes, roi: ROI, map_size: int) -> np.ndarray:
    """Union of box footprints as a ``(map_size, map_size)`` bool raster."""
    xs, ys = bev_cell_centers(roi, map_size)
    out = np.zeros((map_size, map_size), dtype=bool)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    for c, s, yaw in zip(boxes.center, boxes.size, boxes.yaw):
        half = 0.5 * math.hypot(s[0], s[2])
        r0, r1 = np.searchsorted(xs, [c[0] - half, c[0] + half])
        c0, c1 = np.searchsorted(ys, [c[1] - half, c[1] + half])
        if r0 >= r1 or c0 >= c1:
            continue
        dx = gx[r0:r1, c0:c1] - c[0]
        dy = gy[r0:r1, c0:c1] - c[1]
        along = math.cos(yaw) * dx + math.sin(yaw) * dy
        across = -math.sin(yaw) * dx + math.cos(yaw) * dy
        out[r0:r1, c0:c1] |= (np.abs(along) <= s[2] / 2) & (np.abs(across) <= s[0] / 2)
    return out


def _distance_to_polyline(px, py, line):
    d = np.full(px.shape, np.inf)
    for (x0, y0), (x1, y1) in zip(line[:-1], line[1:]):
        vx, vy = x1 - x0, y1 - y0
        L2 = vx * vx + vy * vy
        if L2 == 0.0:  # repeated vertex, e.g. a stationary ego
            continue
        t = np.clip(((px - x0) * vx + (py - y0) * vy) / L2, 0.0, 1.0)
        d = np.minimum(d, np.hypot(px - (x0 + t * vx), py - (y0 + t * vy)))
    return d


def road_centerline(seq: SceneSequence, extend: float = 150.0) -> np.ndarray:
    """Global polyline of the road: the ego path extended straight at both ends."""
    pts = np.array([t.translation[:2] for t in seq.ego_to_global])
    h0 = seq.ego_to_global[0].rotation[:, 0][:2]
    h1 = seq.ego_to_global[-1].rotation[:, 0][:2]
    return np.vstack([pts[0] - extend * h0, pts[::4], pts[-1:], pts[-1] + extend * h1])


def bev_gt(seq: SceneSequence, sweep_idx: int, map_size: int = 256, roi: ROI | None = None) -> np.ndarray:
    """Binary ``(3, map_size, map_size)`` map: drivable, lane, vehicle."""
    roi = roi or seq.config.roi_box
    cfg = seq.config
    xs, ys = bev_cell_centers(roi, map_size)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    l2g = seq.lidar_to_global(sweep_idx)
    pts = l2g.apply(np.stack([gx, gy, np.zeros_like(gx)], axis=-1))
    dist = _distance_to_polyline(pts[..., 0], pts[..., 1], road_centerline(seq))
    drivable = dist <= cfg.road_half_width
    lane = np.zeros_like(drivable)
    for off in cfg.lane_offsets:
        lane |= np.abs(dist - off) <= cfg.lane_half_width
    lane &= drivable
    boxes = seq.boxes(sweep_idx)
    veh = boxes.subset(np.isin(boxes.cls, VEHICLE_CLASSES))
    vehicle = rasterize_footprints(veh, roi, map_size)
    return np.stack([drivable, lane, vehicle]).astype(np.float64)


# ---------------------------------------------------------------------------
# temporal sampling
# ---------------------------------------------------------------------------


def sample_prev_frame(t_idx: int, mode: str, rng: np.random.Generator | None = None,
                      train_offsets: tuple = TRAIN_OFFSETS, infer_offset: int = INFER_OFFSET) -> tuple[int, bool]:
    """Index of the auxiliary previous sweep and whether it was clamped to 0.

    Training draws an integer offset uniformly from ``train_offsets``
    (inclusive); inference uses ``infer_offset``.
    """
    if mode == "train":
        if rng is None:
            raise ValueError("training-mode sampling needs an rng")
        offset = int(rng.integers(train_offsets[0], train_offsets[1] + 1))
    elif mode == "infer":
        offset = infer_offset
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    prev = t_idx - offset
    if prev < 0:
        return 0, True
    return prev, False


# ---------------------------------------------------------------------------
# on-disk dataset
# ---------------------------------------------------------------------------


def _tf_to_list(t: RigidTransform) -> list:
    return [list(map(float, row)) for row in t.matrix]


def scene_manifest(seq: SceneSequence) -> dict:
    o = seq.objects
    return {
        "seed": int(seq.seed),
        "config": seq.config.to_dict(),
        "calibration": [
            {"camera": i, "K": seq.rig.intrinsics[i].K.reshape(-1).tolist(),
             "cam_to_lidar": _tf_to_list(seq.rig.cam_to_lidar[i])}
            for i in range(seq.rig.n_cams)
        ],
        "image_size": [seq.rig.image_w, seq.rig.image_h],
        "frames": [
            {"sweep": k, "timestamp": float(seq.timestamps[k]),
             "lidar_to_ego": _tf_to_list(seq.lidar_to_ego), "ego_to_global": _tf_to_list(seq.ego_to_global[k]),
             "keyframe": k % seq.config.keyframe_every == 0}
            for k in range(seq.n_sweeps)
        ],
        "objects": [
            {"class": CLASS_NAMES[int(c)], "center0": list(map(float, cc)), "size_whl": list(map(float, s)),
             "yaw": float(y), "velocity": list(map(float, v))}
            for c, cc, s, y, v in zip(o.cls, o.center0, o.size, o.yaw, o.velocity)
        ],
    }


def scene_from_manifest(m: dict) -> SceneSequence:
    cfg = SceneConfig.from_dict(m["config"])
    intr = tuple(CameraIntrinsics(np.array(c["K"]).reshape(4, 4)) for c in m["calibration"])
    ext = tuple(RigidTransform(np.array(c["cam_to_lidar"]), f"camera{c['camera']}", "lidar") for c in m["calibration"])
    w, h = m["image_size"]
    rig = CameraRig(intr, ext, w, h)
    frames = m["frames"]
    ts = np.array([f["timestamp"] for f in frames])
    ego = [RigidTransform(np.array(f["ego_to_global"]), f"ego@{f['sweep']}", "global") for f in frames]
    l2e = RigidTransform(np.array(frames[0]["lidar_to_ego"]), "lidar", "ego")
    objs = m["objects"]
    objects = SceneObjects(
        np.array([CLASS_NAMES.index(o["class"]) for o in objs], dtype=int),
        np.array([o["center0"] for o in objs], dtype=float).reshape(-1, 3),
        np.array([o["size_whl"] for o in objs], dtype=float).reshape(-1, 3),
        np.array([o["yaw"] for o in objs], dtype=float),
        np.array([o["velocity"] for o in objs], dtype=float).reshape(-1, 2),
    )
    return SceneSequence(cfg, ts, ego, l2e, rig, objects, int(m["seed"]))


def scene_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def write_dataset(root, cfg: SceneConfig, n_scenes: int, seed: int, images: str = "keyframes",
                  map_size: int = 256) -> Path:
    """Write ``n_scenes`` scenes under ``root``.

    Layout::

        root/index.json                      scene list + generator settings
        root/scene_0000/manifest.json         calibration, ego poses, objects
        root/scene_0000/img_s{sweep:02d}_c{cam}.pgm
        root/scene_0000/bev_s{sweep:02d}_{class}.pgm

    ``images`` selects which sweeps get image/BEV files: ``"all"``,
    ``"keyframes"`` or ``"none"``. Manifests alone determine every sample;
    loaders re-render from them.
    """
    if n_scenes <= 0:
        raise SceneConfigError("scene count must be positive; refusing to write an empty dataset")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for i, s in enumerate(scene_seeds(seed, n_scenes)):
        seq = generate_scene(cfg, s)
        d = root / f"scene_{i:04d}"
        d.mkdir(exist_ok=True)
        (d / "manifest.json").write_text(json.dumps(scene_manifest(seq), indent=1, sort_keys=True))
        sweeps = {"all": range(seq.n_sweeps), "keyframes": seq.keyframes, "none": []}[images]
        for k in sweeps:
            for c, img in enumerate(render_views(seq, k)):
                write_pgm(d / f"img_s{k:02d}_c{c}.pgm", img)
            for name, ch in zip(BEV_CLASSES, bev_gt(seq, k, map_size)):
                write_pgm(d / f"bev_s{k:02d}_{name}.pgm", ch)
        names.append(d.name)
    index = {"seed": seed, "n_scenes": n_scenes, "scenes": names, "config": cfg.to_dict(),
             "images": images, "map_size": map_size}
    (root / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return root


def load_dataset(root) -> list[SceneSequence]:
    root = Path(root)
    index = json.loads((root / "index.json").read_text())
    return [scene_from_manifest(json.loads((root / n / "manifest.json").read_text())) for n in index["scenes"]]


def dataset_hash(root) -> str:
    """SHA-256 over the index and every manifest, in scene order."""
    root = Path(root)
    h = hashlib.sha256((root / "index.json").read_bytes())
    for n in json.loads((root / "index.json").read_text())["scenes"]:
        h.update((root / n / "manifest.json").read_bytes())
    return h.hexdigest()

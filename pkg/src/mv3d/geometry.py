"""Coordinate frames, pinhole cameras, frustum grids and cross-frame alignment.

Conventions
-----------
* Frame labels are strings such as ``"camera0@12"``, ``"lidar@12"``,
  ``"ego@12"`` and ``"global"``; the suffix is the sweep index.
* Lidar/ego frames: x forward, y left, z up. Camera frames: x right, y down,
  z along the optical axis.
* Pixel centres sit at ``(j + 0.5) * stride`` horizontally and
  ``(i + 0.5) * stride`` vertically for feature cell ``(i, j)``.
* A frustum point is stored as ``(u*d, v*d, d, 1)`` so a single 4x4 inverse
  intrinsic maps it to the camera frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9


class FrameError(ValueError):
    """Transforms were chained across mismatched coordinate frames."""


class GeometryError(ValueError):
    pass


def frame(name: str, sweep: int | None = None) -> str:
    return name if sweep is None else f"{name}@{sweep}"


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) map from ``src`` frame coordinates to ``dst`` frame coordinates."""

    matrix: np.ndarray
    src: str
    dst: str

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError(f"transform must be 4x4, got {m.shape}")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise GeometryError("bottom row must be exactly [0, 0, 0, 1]")
        r = m[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise GeometryError("rotation block is not orthonormal with det 1")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_rt(cls, rotation, translation, src: str, dst: str) -> "RigidTransform":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m, src, dst)

    @classmethod
    def identity(cls, src: str, dst: str) -> "RigidTransform":
        return cls(np.eye(4), src, dst)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def inverse(self) -> "RigidTransform":
        r = self.rotation
        m = np.eye(4)
        m[:3, :3] = r.T
        m[:3, 3] = -r.T @ self.translation
        return RigidTransform(m, self.dst, self.src)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self @ other``: apply ``other`` first, then ``self``."""
        if other.dst != self.src:
            raise FrameError(f"cannot compose {self.src}->{self.dst} after {other.src}->{other.dst}")
        return RigidTransform(self.matrix @ other.matrix, other.src, self.dst)

    __matmul__ = compose

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform ``(..., 3)`` points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def relabel(self, src: str | None = None, dst: str | None = None) -> "RigidTransform":
        return RigidTransform(self.matrix, src or self.src, dst or self.dst)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return self.src == other.src and self.dst == other.dst and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash((self.src, self.dst, self.matrix.tobytes()))


def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation from a random unit quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_transform(rng: np.random.Generator, src: str, dst: str, scale: float = 10.0) -> RigidTransform:
    return RigidTransform.from_rt(random_rotation(rng), rng.uniform(-scale, scale, 3), src, dst)


@dataclass(frozen=True, eq=False)
class CameraIntrinsics:
    """Pinhole intrinsics padded to 4x4."""

    K: np.ndarray

    def __post_init__(self):
        k = np.array(self.K, dtype=np.float64)
        if k.shape != (4, 4):
            raise GeometryError(f"K must be 4x4, got {k.shape}")
        if not (k[0, 0] > 0 and k[1, 1] > 0):
            raise GeometryError("focal lengths must be positive")
        if abs(np.linalg.det(k)) < 1e-12:
            raise GeometryError("singular intrinsic matrix")
        k.setflags(write=False)
        object.__setattr__(self, "K", k)

    @classmethod
    def from_pinhole(cls, fx: float, fy: float, cx: float, cy: float) -> "CameraIntrinsics":
        k = np.eye(4)
        k[0, 0], k[1, 1], k[0, 2], k[1, 2] = fx, fy, cx, cy
        return cls(k)

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    def project(self, points_cam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Camera-frame ``(..., 3)`` points to pixel ``(..., 2)`` and depth ``(...)``."""
        p = np.asarray(points_cam, dtype=np.float64)
        h = np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1) @ self.K.T
        d = h[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = h[..., :2] / d[..., None]
        return uv, d

    def __eq__(self, other):
        return isinstance(other, CameraIntrinsics) and np.array_equal(self.K, other.K)

    def __hash__(self):
        return hash(self.K.tobytes())


@dataclass(frozen=True)
class DepthSpec:
    """Depth bins along each camera ray.

    ``mode="linear"`` spaces bins uniformly on ``[near, far]``; ``"lid"`` uses
    linear-increasing spacing (bin widths grow linearly with index).
    """

    near: float = 1.0
    far: float = 60.0
    num: int = 64
    mode: str = "linear"

    def depths(self) -> np.ndarray:
        if self.num < 1:
            raise GeometryError("depth bin count must be >= 1")
        if not 0 < self.near <= self.far:
            raise GeometryError("need 0 < near <= far")
        if self.num == 1:
            return np.array([self.near])
        if self.mode == "linear":
            d = np.linspace(self.near, self.far, self.num)
        elif self.mode == "lid":
            k = np.arange(self.num)
            d = self.near + (self.far - self.near) * k * (k + 1) / ((self.num - 1) * self.num)
        else:
            raise GeometryError(f"unknown depth mode {self.mode!r}")
        if np.any(np.diff(d) <= 0):
            raise GeometryError("depth bins must be strictly increasing")
        return d


@dataclass(frozen=True, eq=False)
class FrustumGrid:
    feat_w: int
    feat_h: int
    stride: int
    depths: np.ndarray
    points: np.ndarray  # (feat_h * feat_w * D, 4), row-major cells then depth

    @property
    def num_depths(self) -> int:
        return len(self.depths)

    def pixels(self) -> np.ndarray:
        """Pixel centres ``(feat_h, feat_w, 2)`` as ``(u, v)``."""
        pts = self.points.reshape(self.feat_h, self.feat_w, self.num_depths, 4)
        return pts[:, :, 0, :2] / pts[:, :, 0, 2:3]


def make_frustum_grid(feat_w: int, feat_h: int, stride: int, depth_spec: DepthSpec | np.ndarray | list = DepthSpec()) -> FrustumGrid:
    """Meshgrid of pixel centres times depth bins in homogeneous frustum space."""
    if min(feat_w, feat_h, stride) < 1:
        raise GeometryError("feat_w, feat_h and stride must be >= 1")
    if isinstance(depth_spec, DepthSpec):
        depths = depth_spec.depths()
    else:
        depths = np.asarray(depth_spec, dtype=np.float64)
        if depths.ndim != 1 or depths.size < 1:
            raise GeometryError("need at least one depth")
        if depths[0] <= 0 or np.any(np.diff(depths) <= 0):
            raise GeometryError("depths must be positive and strictly increasing")
    u = (np.arange(feat_w) + 0.5) * stride
    v = (np.arange(feat_h) + 0.5) * stride
    vv, uu, dd = np.meshgrid(v, u, depths, indexing="ij")
    pts = np.stack([uu * dd, vv * dd, dd, np.ones_like(dd)], axis=-1).reshape(-1, 4)
    depths = depths.copy()
    depths.setflags(write=False)
    pts.setflags(write=False)
    return FrustumGrid(feat_w, feat_h, stride, depths, pts)


@dataclass(frozen=True, eq=False)
class Coords3D:
    """Frustum points in a lidar frame, shape ``(..., H_f, W_f, D, 3)``.

    ``mask`` has shape ``(..., H_f, W_f, D)`` and is only meaningful once the
    coordinates have been normalised; before that it is all True.
    """

    points: np.ndarray
    frame: str
    mask: np.ndarray | None = None
    normalized: bool = False

    def __post_init__(self):
        if self.mask is None:
            object.__setattr__(self, "mask", np.ones(self.points.shape[:-1], dtype=bool))

    @property
    def shape(self):
        return self.points.shape


def unproject_to_lidar(grid: FrustumGrid, intr: CameraIntrinsics, cam_to_lidar: RigidTransform) -> Coords3D:
    """Lift every frustum point through ``K^-1`` and the camera extrinsic."""
    if not cam_to_lidar.src.startswith("camera") or not cam_to_lidar.dst.startswith("lidar"):
        raise FrameError(f"expected a camera->lidar transform, got {cam_to_lidar.src}->{cam_to_lidar.dst}")
    kinv = intr.inverse
    m = cam_to_lidar.matrix @ kinv
    p = grid.points @ m.T
    p = p[:, :3] / p[:, 3:4]
    return Coords3D(p.reshape(grid.feat_h, grid.feat_w, grid.num_depths, 3), cam_to_lidar.dst)


def relative_lidar_transform(lidar_to_ego_t: RigidTransform, ego_to_global_t: RigidTransform,
                             lidar_to_ego_prev: RigidTransform, ego_to_global_prev: RigidTransform) -> RigidTransform:
    """Map lidar coordinates of the previous frame into the current lidar frame.

    Composes ``T_l(t)<-e(t) . T_e(t)<-g . T_g<-e(t-1) . T_e(t-1)<-l(t-1)`` with
    every intermediate frame label checked.
    """
    for a, b in ((lidar_to_ego_t, ego_to_global_t), (lidar_to_ego_prev, ego_to_global_prev)):
        if a.dst != b.src:
            raise FrameError(f"lidar->ego ends in {a.dst} but ego->global starts at {b.src}")
        if b.dst != "global":
            raise FrameError(f"ego->global must end in 'global', got {b.dst}")
    return (lidar_to_ego_t.inverse() @ ego_to_global_t.inverse()
            @ ego_to_global_prev @ lidar_to_ego_prev)


def align_coords(prev: Coords3D, rel: RigidTransform) -> Coords3D:
    if prev.frame != rel.src:
        raise FrameError(f"coords are in {prev.frame} but transform starts at {rel.src}")
    if prev.normalized:
        raise GeometryError("align raw metric coords, not normalised ones")
    return Coords3D(rel.apply(prev.points), rel.dst, prev.mask)


@dataclass(frozen=True)
class ROI:
    """Axis-aligned box in metres."""

    xmin: float = -61.2
    xmax: float = 61.2
    ymin: float = -61.2
    ymax: float = 61.2
    zmin: float = -10.0
    zmax: float = 10.0

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin and self.zmax > self.zmin):
            raise GeometryError("region of interest must have positive extent on every axis")

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.xmin, self.ymin, self.zmin])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.xmax, self.ymax, self.zmax])

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts)
        return np.all((p >= self.lo) & (p <= self.hi), axis=-1)

    def to_list(self) -> list[float]:
        return [self.xmin, self.xmax, self.ymin, self.ymax, self.zmin, self.zmax]

    @classmethod
    def from_list(cls, v) -> "ROI":
        return cls(*map(float, v))


def normalize_coords(coords: Coords3D, roi: ROI) -> Coords3D:
    """Affine-map the ROI onto the unit cube, clamp, and mask points that left it."""
    n = (coords.points - roi.lo) / roi.extent
    inside = np.all((n >= 0.0) & (n <= 1.0), axis=-1)
    return Coords3D(np.clip(n, 0.0, 1.0), coords.frame, inside & coords.mask, normalized=True)


def camera_pose(yaw: float, position, pitch: float = 0.0) -> np.ndarray:
    """Camera-to-lidar rotation for a camera looking along heading ``yaw``.

    The optical axis is ``(cos yaw, sin yaw, 0)`` tilted down by ``pitch``,
    image x points to the right of that heading and image y points down.
    """
    fwd = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), -np.sin(pitch)])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)

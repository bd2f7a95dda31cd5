"""Turning scenes into model inputs and training/evaluation samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform, relative_lidar_transform
from .scene import Boxes, CameraRig, SceneSequence, bev_gt, render_views, sample_prev_frame


@dataclass
class ModelInput:
    """What the network sees for one timestep.

    ``ext_t``/``ext_prev`` are the extrinsics the system *believes* in
    (possibly perturbed); ``rel`` maps lidar@prev to lidar@t from the ego
    poses it believes in.
    """

    images_t: np.ndarray  # (N_cams, H, W)
    intrinsics: tuple
    ext_t: list
    images_prev: np.ndarray | None = None
    ext_prev: list | None = None
    rel: RigidTransform | None = None
    zero_cams: tuple = ()
    cam_ids: tuple | None = None  # physical camera index of each slot; None means 0..n-1

    @property
    def n_cams(self) -> int:
        return self.images_t.shape[0]

    @property
    def cameras(self) -> tuple:
        return tuple(range(self.n_cams)) if self.cam_ids is None else self.cam_ids


@dataclass
class Sample:
    inputs: ModelInput
    gt: Boxes
    bev: np.ndarray | None = None
    scene: int = 0
    t_idx: int = 0
    prev_idx: int = 0
    clamped: bool = False
    image_idx: int = 0  # sweep the current images were actually taken at


class RenderCache:
    """Memoises rendered views per (scene, sweep); rendering uses the true rig."""

    def __init__(self, max_items: int = 4096):
        self._store: dict = {}
        self.max_items = max_items

    def get(self, seq: SceneSequence, k: int) -> np.ndarray:
        key = (id(seq), k)
        img = self._store.get(key)
        if img is None:
            img = render_views(seq, k)
            if len(self._store) >= self.max_items:
                self._store.pop(next(iter(self._store)))
            self._store[key] = img
        return img


def make_sample(seq: SceneSequence, t_idx: int, prev_idx: int | None, *, rig: CameraRig | None = None,
                delay: int = 0, with_bev: bool = False, map_size: int = 256, scene: int = 0,
                cache: RenderCache | None = None, clamped: bool = False) -> Sample:
    """Build a sample at sweep ``t_idx``.

    ``rig`` is the calibration handed to the model (defaults to the true one).
    ``delay`` shifts which sweeps the images come from while poses,
    timestamps and annotations stay at ``t_idx``; the delayed index is
    clamped at 0. ``prev_idx=None`` gives a single-frame sample.
    """
    believed = rig or seq.rig

    def images(k):
        k = max(0, k - delay)
        return cache.get(seq, k) if cache is not None else render_views(seq, k)

    inp = ModelInput(images(t_idx), believed.intrinsics, believed.extrinsics_at(t_idx))
    if prev_idx is not None:
        inp.images_prev = images(prev_idx)
        inp.ext_prev = believed.extrinsics_at(prev_idx)
        inp.rel = relative_lidar_transform(seq.lidar_to_ego_at(t_idx), seq.ego_to_global[t_idx],
                                           seq.lidar_to_ego_at(prev_idx), seq.ego_to_global[prev_idx])
    bev = bev_gt(seq, t_idx, map_size) if with_bev else None
    return Sample(inp, seq.annotations(t_idx), bev, scene, t_idx, prev_idx if prev_idx is not None else t_idx,
                  clamped, max(0, t_idx - delay))


def eval_frames(seqs, min_history: int = 19) -> list[tuple[int, int]]:
    """(scene, keyframe) pairs with enough history for inference sampling plus delay."""
    return [(s, k) for s, seq in enumerate(seqs) for k in seq.keyframes if k >= min_history]


def train_frames(seqs) -> list[tuple[int, int]]:
    return [(s, k) for s, seq in enumerate(seqs) for k in seq.keyframes]


def eval_sample(seq, t_idx, single_frame: bool, **kw) -> Sample:
    if single_frame:
        return make_sample(seq, t_idx, None, **kw)
    prev, clamped = sample_prev_frame(t_idx, "infer")
    return make_sample(seq, t_idx, prev, clamped=clamped, **kw)


def drop_camera(inp: ModelInput, cam_id: int, mode: str = "remove") -> ModelInput:
    """Simulate a missing camera; ``cam_id`` is the slot index in ``inp``.

    ``"remove"`` deletes its images and calibration so both frames lose that
    camera's tokens; ``"zero"`` keeps the tokens but zeroes its features.
    """
    if not 0 <= cam_id < inp.n_cams:
        raise IndexError(f"camera {cam_id} not in [0, {inp.n_cams})")
    if mode == "zero":
        return ModelInput(inp.images_t, inp.intrinsics, inp.ext_t, inp.images_prev, inp.ext_prev, inp.rel,
                          tuple(sorted(set(inp.zero_cams) | {cam_id})), inp.cam_ids)
    if mode != "remove":
        raise ValueError(f"unknown camera-miss mode {mode!r}")
    if inp.n_cams == 1:
        raise ValueError("cannot remove the only camera")
    keep = [i for i in range(inp.n_cams) if i != cam_id]
    return ModelInput(
        inp.images_t[keep], tuple(inp.intrinsics[i] for i in keep), [inp.ext_t[i] for i in keep],
        None if inp.images_prev is None else inp.images_prev[keep],
        None if inp.ext_prev is None else [inp.ext_prev[i] for i in keep],
        inp.rel, tuple(z - (z > cam_id) for z in inp.zero_cams if z != cam_id),
        tuple(inp.cameras[i] for i in keep),
    )

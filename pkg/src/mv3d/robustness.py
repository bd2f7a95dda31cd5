"""Sensor-error protocols and the sweep harness.

Three error kinds are simulated on the evaluation inputs:

* ``extrinsics_rotation``: one camera, chosen uniformly, gets its
  camera-to-lidar rotation left-multiplied by ``Rz(g) Ry(b) Rx(a)`` with each
  angle uniform in ``[-R_max, R_max]`` degrees. Images are still rendered
  with the true rig; only the calibration handed to the model is wrong.
  The draw is repeated per frame from a generator seeded by
  ``(seed, scene, sweep)``.
* ``camera_miss``: one camera's tokens are removed (or zeroed).
* ``time_delay``: images come from ``k`` sweeps earlier, while poses,
  timestamps and annotations stay current.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import RenderCache, Sample, drop_camera, eval_frames, make_sample
from .evaluate import evaluate_model
from .geometry import RigidTransform, rot_x, rot_y, rot_z
from .metrics import EvalResult, Predictions, evaluate_detections
from .scene import CameraRig, SceneSequence, bev_gt, in_camera, sample_prev_frame

KINDS = ("clean", "extrinsics_rotation", "camera_miss", "time_delay")
SPEC_FIELDS = ("kind", "r_max", "cam_id", "delay", "seed")


class NoiseSpecError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "clean"
    r_max: float = 0.0  # degrees
    cam_id: int | None = None  # camera to drop; None draws one per frame
    delay: int = 0  # sweeps
    seed: int = 0
    miss_mode: str = "remove"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise NoiseSpecError(f"unknown noise kind {self.kind!r}")
        if self.r_max < 0 or self.delay < 0:
            raise NoiseSpecError("r_max and delay must be nonnegative")
        if self.miss_mode not in ("remove", "zero"):
            raise NoiseSpecError(f"unknown camera-miss mode {self.miss_mode!r}")

    def columns(self) -> dict:
        return {"kind": self.kind, "r_max": self.r_max, "cam_id": "" if self.cam_id is None else self.cam_id,
                "delay": self.delay, "seed": self.seed}

    def to_dict(self) -> dict:
        return asdict(self)


def noise_rotation(alpha: float, beta: float, gamma: float) -> np.ndarray:
    """``Rz(gamma) @ Ry(beta) @ Rx(alpha)``, angles in degrees."""
    a, b, g = np.radians([alpha, beta, gamma])
    return rot_z(g) @ rot_y(b) @ rot_x(a)


def perturb_extrinsics(rig: CameraRig, spec: NoiseSpec, rng: np.random.Generator | None = None):
    """Rotate one randomly chosen camera's extrinsic by the spec's noise.

    Returns ``(rig, cam, angles_deg)``. With ``r_max == 0`` the input rig
    object itself is returned.
    """
    if spec.kind != "extrinsics_rotation":
        raise NoiseSpecError(f"perturb_extrinsics needs an extrinsics_rotation spec, got {spec.kind!r}")
    if spec.r_max == 0:
        return rig, None, (0.0, 0.0, 0.0)
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    cam = int(rng.integers(rig.n_cams))
    angles = tuple(float(x) for x in rng.uniform(-spec.r_max, spec.r_max, 3))
    old = rig.cam_to_lidar[cam]
    new = RigidTransform.from_rt(noise_rotation(*angles) @ old.rotation, old.translation, old.src, old.dst)
    return rig.replace_extrinsic(cam, new), cam, angles


def frame_rng(spec: NoiseSpec, scene: int, t_idx: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, scene, t_idx])


def apply_time_delay(seq: SceneSequence, t_idx: int, k: int, prev_idx: int | None = None, **kw) -> Sample:
    """Sample whose images (current and previous) are ``k`` sweeps stale."""
    if k < 0:
        raise NoiseSpecError("delay must be nonnegative")
    return make_sample(seq, t_idx, prev_idx, delay=k, **kw)


def perturbed_sample(seq: SceneSequence, scene: int, t_idx: int, spec: NoiseSpec, single_frame: bool,
                     cache: RenderCache | None = None, with_bev: bool = False, map_size: int = 256) -> Sample:
    """The evaluation sample for ``(scene, t_idx)`` under ``spec``."""
    prev, clamped = (None, False) if single_frame else sample_prev_frame(t_idx, "infer")
    rig = None
    if spec.kind == "extrinsics_rotation":
        rig = perturb_extrinsics(seq.rig, spec, frame_rng(spec, scene, t_idx))[0]
    delay = spec.delay if spec.kind == "time_delay" else 0
    smp = make_sample(seq, t_idx, prev, rig=rig, delay=delay, scene=scene, cache=cache, clamped=clamped)
    if spec.kind == "camera_miss":
        cam = spec.cam_id
        if cam is None:
            cam = int(frame_rng(spec, scene, t_idx).integers(smp.inputs.n_cams))
        smp.inputs = drop_camera(smp.inputs, cam, spec.miss_mode)
    if with_bev:
        smp.bev = bev_gt(seq, t_idx, map_size)
    return smp


# ---------------------------------------------------------------------------
# geometry-oracle detector
# ---------------------------------------------------------------------------


class OracleDetector:
    """Perfect perception up to the inputs it is handed.

    Every object whose centre is visible in one of the sample's (remaining)
    cameras at the sweep the images were taken is reported with score 1,
    lifted into the lidar frame through the *believed* extrinsics. Velocity
    and yaw are read off at that same sweep.
    """

    def __init__(self, scenes: list[SceneSequence]):
        self.scenes = scenes

    def detect(self, smp: Sample) -> Predictions:
        seq = self.scenes[smp.scene]
        k = smp.image_idx
        boxes = seq.boxes(k)
        cams = smp.inputs.cameras
        found = np.zeros(len(boxes), dtype=bool)
        centers = boxes.center.copy()
        for slot, cam in enumerate(cams):
            if cam in smp.inputs.zero_cams:
                continue
            vis = in_camera(boxes.center, seq.rig, cam) & ~found
            if not vis.any():
                continue
            p_cam = seq.rig.cam_to_lidar[cam].inverse().apply(boxes.center[vis])
            centers[vis] = smp.inputs.ext_t[slot].apply(p_cam)
            found |= vis
        keep = found & seq.config.roi_box.contains(centers)
        return Predictions(boxes.cls[keep], np.ones(int(keep.sum())), centers[keep], boxes.yaw[keep],
                           boxes.velocity[keep])


def evaluate_oracle(oracle: OracleDetector, frames, sample_fn) -> tuple[EvalResult, list, list]:
    preds, gts = [], []
    for s, k in frames:
        smp = sample_fn(s, k)
        preds.append(oracle.detect(smp))
        gts.append(smp.gt)
    return evaluate_detections(preds, gts), preds, gts


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def extrinsics_grid(r_values=(0, 2, 4, 6, 8), seeds=(0,)) -> list[NoiseSpec]:
    return [NoiseSpec("extrinsics_rotation", r_max=float(r), seed=s) for s in seeds for r in r_values]


def delay_grid(delays=(0, 1, 2, 3, 4), seeds=(0,)) -> list[NoiseSpec]:
    return [NoiseSpec("time_delay", delay=int(k), seed=s) for s in seeds for k in delays]


def camera_miss_grid(n_cams: int, seeds=(0,), mode: str = "remove") -> list[NoiseSpec]:
    return [NoiseSpec("camera_miss", cam_id=c, seed=s, miss_mode=mode) for s in seeds for c in range(n_cams)]


def robustness_sweep(model, scenes: list[SceneSequence], grid: list[NoiseSpec], frames=None,
                     batch_size: int = 8, with_bev: bool = False) -> list[dict]:
    """Evaluate ``model`` (a PerceptionModel or an OracleDetector) under every spec.

    Returns one row per spec: the spec columns followed by the metric columns.
    """
    frames = eval_frames(scenes) if frames is None else list(frames)
    cache = RenderCache()
    rows = []
    for spec in grid:
        if isinstance(model, OracleDetector):
            def fn(s, k, spec=spec):
                return perturbed_sample(scenes[s], s, k, spec, False, cache)
            res = evaluate_oracle(model, frames, fn)[0]
        else:
            bev = with_bev and model.config.seg

            def fn(s, k, spec=spec, bev=bev):
                return perturbed_sample(scenes[s], s, k, spec, model.config.single_frame, cache, bev,
                                        model.config.map_size)
            res = evaluate_model(model, scenes, frames, fn, batch_size, with_bev=bev)[0]
        rows.append({**spec.columns(), **res.row()})
    return rows


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(rows[0])
    w.writerow(cols)
    for r in rows:
        w.writerow([format_value(r[c]) for c in cols])
    return buf.getvalue()


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def aggregate(rows: list[dict], key: str, metric: str) -> dict:
    """Mean of ``metric`` grouped by the spec column ``key`` (e.g. over seeds)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(float(r[metric]))
    return {k: math.fsum(v) / len(v) for k, v in groups.items()}


def plot_rows(rows: list[dict], path, metrics=("mAP", "nds", "mAVE")) -> None:
    """Write an SVG with one panel per noise kind; output is byte-stable for equal input."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "mv3d"
    kinds = [k for k in KINDS if any(r["kind"] == k for r in rows)]
    xkey = {"clean": "seed", "extrinsics_rotation": "r_max", "camera_miss": "cam_id", "time_delay": "delay"}
    fig, axes = plt.subplots(1, max(1, len(kinds)), figsize=(4.5 * max(1, len(kinds)), 3.5), squeeze=False)
    for ax, kind in zip(axes[0], kinds):
        sub = [r for r in rows if r["kind"] == kind]
        for m in metrics:
            agg = aggregate(sub, xkey[kind], m)
            xs = sorted(agg, key=lambda v: float(v) if str(v) != "" else -1.0)
            ax.plot([float(x) if str(x) != "" else -1.0 for x in xs], [agg[x] for x in xs], marker="o", label=m)
        ax.set_title(kind)
        ax.set_xlabel(xkey[kind])
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_sweep(rows: list[dict], csv_path, svg_path=None) -> None:
    Path(csv_path).write_text(rows_to_csv(rows))
    if svg_path is not None:
        plot_rows(rows, svg_path)


__all__ = [
    "NoiseSpec", "perturb_extrinsics", "drop_camera", "apply_time_delay", "robustness_sweep", "OracleDetector",
    "extrinsics_grid", "delay_grid", "camera_miss_grid", "noise_rotation", "perturbed_sample", "write_sweep",
    "rows_to_csv", "aggregate", "plot_rows", "evaluate_oracle",
]

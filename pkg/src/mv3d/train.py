"""Losses over a batch, optimisers and the training loop."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, backward, constant, current_tape, zero_grad
from .data import RenderCache, Sample, make_sample, train_frames
from .heads import BOX_DIM, encode_boxes, focal_loss, l1_box_loss, match, weighted_ce_loss
from .model import ModelOutput, PerceptionModel
from .scene import SceneSequence, bev_gt, sample_prev_frame


class NumericError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 800
    batch_size: int = 4
    optimizer: str = "sgd"  # "sgd" (momentum) or "adamw"
    lr: float = 2e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup: int = 20
    min_lr_ratio: float = 0.02
    grad_clip: float = 10.0
    det_weight: float = 1.0
    seg_weight: float = 1.0
    cls_weight: float = 1.0
    box_weight: float = 1.0
    match_cls: float = 1.0
    match_box: float = 5.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    omega_max: float = 100.0
    aux_loss: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise TrainConfigError("steps must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("sgd", "adamw"):
            raise TrainConfigError(f"unknown optimizer {self.optimizer!r}")
        if min(self.det_weight, self.seg_weight, self.cls_weight, self.box_weight) < 0:
            raise TrainConfigError("loss weights must be nonnegative")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise TrainConfigError("need lr > 0 and momentum in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainConfigError(f"unknown training options {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def gt_codes(sample: Sample) -> np.ndarray:
    g = sample.gt
    if len(g) == 0:
        return np.zeros((0, BOX_DIM))
    return encode_boxes(g.center, g.size, g.yaw, g.velocity)


def detection_losses(out: ModelOutput, samples: list[Sample], tc: TrainConfig) -> tuple[Tensor, Tensor]:
    """Focal and L1 losses, averaged over the decoder layers that are supervised."""
    layers = out.det_layers if tc.aux_loss else [out.det]
    codes = [gt_codes(s) for s in samples]
    all_codes = np.concatenate(codes) if codes else np.zeros((0, BOX_DIM))
    focal_sum = l1_sum = None
    for det in layers:
        bsz, n = det.class_logits.shape[:2]
        n_cls = det.class_logits.shape[-1]
        targets = np.full((bsz, n), n_cls, dtype=int)
        pairs = []
        offset = 0
        for b, (s, c) in enumerate(zip(samples, codes)):
            for i, j in match(det, s.gt.cls, c, tc.match_cls, tc.match_box, batch_index=b):
                targets[b, i] = s.gt.cls[j]
                pairs.append((b * n + i, offset + j))
            offset += len(c)
        f = focal_loss(det.class_logits, targets, tc.focal_gamma, tc.focal_alpha)
        l1 = l1_box_loss(det.box_code.reshape(bsz * n, BOX_DIM), all_codes, pairs)
        focal_sum = f if focal_sum is None else focal_sum + f
        l1_sum = l1 if l1_sum is None else l1_sum + l1
    scale = 1.0 / len(layers)
    return focal_sum * scale, l1_sum * scale


def total_loss(out: ModelOutput, samples: list[Sample], tc: TrainConfig) -> tuple[Tensor, dict]:
    """``det_weight * (cls_weight * focal + box_weight * L1) + seg_weight * weighted CE``."""
    focal, l1 = detection_losses(out, samples, tc)
    det = focal * tc.cls_weight + l1 * tc.box_weight
    loss = det * tc.det_weight
    parts = {"focal": focal.item(), "l1": l1.item(), "seg_ce": float("nan")}
    if out.bev is not None and tc.seg_weight > 0:
        gt = np.stack([s.bev for s in samples])
        ce = weighted_ce_loss(out.bev, gt, tc.omega_max)
        loss = loss + ce * tc.seg_weight
        parts["seg_ce"] = ce.item()
    parts["total"] = loss.item()
    return loss, parts


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------


def lr_at(step: int, tc: TrainConfig) -> float:
    """Linear warm-up followed by cosine decay to ``min_lr_ratio * lr``."""
    if tc.warmup and step < tc.warmup:
        return tc.lr * (step + 1) / tc.warmup
    span = max(1, tc.steps - tc.warmup)
    frac = min(1.0, (step - tc.warmup) / span)
    lo = tc.lr * tc.min_lr_ratio
    return lo + 0.5 * (tc.lr - lo) * (1.0 + math.cos(math.pi * frac))


class Optimizer:
    """SGD with momentum, or AdamW; weight decay skips biases and norm parameters."""

    def __init__(self, named: dict, tc: TrainConfig):
        self.names = sorted(named)
        self.params = [named[k] for k in self.names]
        self.tc = tc
        self.state1 = [np.zeros_like(p.data) for p in self.params]
        self.state2 = [np.zeros_like(p.data) for p in self.params] if tc.optimizer == "adamw" else None
        self.decay = [p.data.ndim >= 2 for p in self.params]
        self.t = 0

    def step(self, lr: float) -> float:
        """Apply one update; returns the global gradient norm before clipping."""
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        norm = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads))
        if not math.isfinite(norm):
            raise NumericError("non-finite gradient norm")
        scale = min(1.0, self.tc.grad_clip / norm) if self.tc.grad_clip > 0 and norm > 0 else 1.0
        self.t += 1
        tc = self.tc
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = g * scale
            if tc.optimizer == "sgd":
                if self.decay[i]:
                    g = g + tc.weight_decay * p.data
                self.state1[i] = tc.momentum * self.state1[i] + g
                p.data -= lr * self.state1[i]
            else:
                b1, b2 = 0.9, 0.999
                self.state1[i] = b1 * self.state1[i] + (1 - b1) * g
                self.state2[i] = b2 * self.state2[i] + (1 - b2) * g * g
                mhat = self.state1[i] / (1 - b1 ** self.t)
                vhat = self.state2[i] / (1 - b2 ** self.t)
                if self.decay[i]:
                    p.data -= lr * tc.weight_decay * p.data
                p.data -= lr * mhat / (np.sqrt(vhat) + 1e-8)
        return norm


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


class TrainSampler:
    """Draws (scene, keyframe, previous sweep) triples with a seeded generator."""

    def __init__(self, scenes: list[SceneSequence], seed: int, single_frame: bool, with_bev: bool,
                 map_size: int = 256):
        self.scenes = scenes
        self.frames = train_frames(scenes)
        if not self.frames:
            raise ValueError("no training frames")
        self.rng = np.random.default_rng(seed)
        self.single_frame = single_frame
        self.with_bev = with_bev
        self.map_size = map_size
        self.cache = RenderCache()
        self._bev: dict = {}

    def _bev_map(self, s: int, k: int) -> np.ndarray:
        key = (s, k)
        if key not in self._bev:
            self._bev[key] = bev_gt(self.scenes[s], k, self.map_size)
        return self._bev[key]

    def batch(self, size: int) -> list[Sample]:
        out = []
        for idx in self.rng.integers(0, len(self.frames), size):
            s, k = self.frames[int(idx)]
            seq = self.scenes[s]
            if self.single_frame:
                smp = make_sample(seq, k, None, cache=self.cache, scene=s)
            else:
                prev, clamped = sample_prev_frame(k, "train", self.rng)
                smp = make_sample(seq, k, prev, cache=self.cache, scene=s, clamped=clamped)
            if self.with_bev:
                smp.bev = self._bev_map(s, k)
            out.append(smp)
        return out


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

LOG_FIELDS = ("step", "lr", "total", "focal", "l1", "seg_ce", "grad_norm")


def _fmt(x: float) -> str:
    return repr(float(x))


def train(model: PerceptionModel, scenes: list[SceneSequence], tc: TrainConfig, log_path=None,
          dump_dir=None, callback=None) -> list[dict]:
    """Run ``tc.steps`` optimisation steps; returns the per-step log rows.

    On a non-finite loss a JSON diagnostic is written to ``dump_dir`` (if
    given) and :class:`NumericError` is raised.
    """
    with_bev = model.config.seg and tc.seg_weight > 0
    sampler = TrainSampler(scenes, tc.seed, model.config.single_frame, with_bev, model.config.map_size)
    opt = Optimizer(model.params, tc)
    rows = []
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
    try:
        for step in range(tc.steps):
            samples = sampler.batch(tc.batch_size)
            current_tape().reset()
            zero_grad(model.parameters())
            out = model.forward([s.inputs for s in samples])
            if not (np.isfinite(out.det.box.data).all() and np.isfinite(out.det.class_logits.data).all()):
                # caught here because matching cannot rank non-finite costs
                parts = {"focal": float("nan"), "l1": float("nan"), "seg_ce": float("nan"), "total": float("nan")}
                _dump_failure(dump_dir, step, parts, model)
                raise NumericError(f"non-finite network output at step {step}")
            loss, parts = total_loss(out, samples, tc)
            if not math.isfinite(parts["total"]):
                _dump_failure(dump_dir, step, parts, model)
                raise NumericError(f"non-finite loss at step {step}: {parts}")
            backward(loss)
            lr = lr_at(step, tc)
            try:
                gnorm = opt.step(lr)
            except NumericError:
                _dump_failure(dump_dir, step, parts, model)
                raise
            row = {"step": step, "lr": lr, **parts, "grad_norm": gnorm}
            rows.append(row)
            if writer is not None:
                writer.writerow([step] + [_fmt(row[k]) for k in LOG_FIELDS[1:]])
            if callback is not None:
                callback(row)
    finally:
        if fh is not None:
            fh.close()
    return rows


def _dump_failure(dump_dir, step: int, parts: dict, model: PerceptionModel) -> None:
    if dump_dir is None:
        return
    Path(dump_dir).mkdir(parents=True, exist_ok=True)
    norms = {k: float(np.linalg.norm(v.data)) for k, v in sorted(model.params.items())}
    finite = {k: bool(np.isfinite(v.data).all()) for k, v in sorted(model.params.items())}
    info = {"step": step, "losses": {k: repr(v) for k, v in parts.items()}, "param_norms": norms,
            "param_finite": finite}
    Path(dump_dir, "numeric_failure.json").write_text(json.dumps(info, indent=2, sort_keys=True))

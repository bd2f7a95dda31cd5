"""Running a model (or a stand-in detector) over evaluation frames."""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import expit

from .autodiff import no_grad
from .data import RenderCache, Sample, eval_frames, eval_sample
from .heads import Detection3D, decode_yaw
from .metrics import EvalResult, Predictions, bev_counts, evaluate_detections
from .model import PerceptionModel
from .scene import BEV_CLASSES, SceneSequence, bev_gt

# builds the sample fed to the model for (scene index, keyframe)
SampleFn = Callable[[int, int], Sample]


def predictions_from_det(det: Detection3D, b: int) -> Predictions:
    """One frame's predictions: score and class from the best sigmoid probability."""
    prob = expit(det.class_logits.data[b])
    box = det.box.data[b]
    return Predictions(np.argmax(prob, axis=-1), np.max(prob, axis=-1), box[:, :3].copy(), decode_yaw(box),
                       box[:, 8:10].copy())


def default_sample_fn(model: PerceptionModel, scenes: list[SceneSequence], cache: RenderCache | None = None,
                      with_bev: bool = False) -> SampleFn:
    cache = cache or RenderCache()

    def fn(s: int, k: int) -> Sample:
        smp = eval_sample(scenes[s], k, model.config.single_frame, cache=cache, scene=s)
        if with_bev:
            smp.bev = bev_gt(scenes[s], k, model.config.map_size)
        return smp

    return fn


def evaluate_model(model: PerceptionModel, scenes: list[SceneSequence], frames=None, sample_fn: SampleFn | None = None,
                   batch_size: int = 8, with_bev: bool | None = None, keep_outputs: bool = False):
    """Evaluate on ``frames`` (default: every keyframe with enough history).

    Returns ``(EvalResult, predictions, ground truths)``; with
    ``keep_outputs`` the per-frame BEV maps are returned as a fourth item.
    """
    frames = eval_frames(scenes) if frames is None else list(frames)
    with_bev = model.config.seg if with_bev is None else (with_bev and model.config.seg)
    sample_fn = sample_fn or default_sample_fn(model, scenes, with_bev=with_bev)
    preds, gts, maps = [], [], []
    inter = np.zeros(len(BEV_CLASSES), dtype=np.int64)
    union = np.zeros(len(BEV_CLASSES), dtype=np.int64)
    with no_grad():
        for start in range(0, len(frames), batch_size):
            chunk = [sample_fn(s, k) for s, k in frames[start:start + batch_size]]
            # samples with different camera sets cannot share a batch
            groups: dict = {}
            for i, smp in enumerate(chunk):
                groups.setdefault(smp.inputs.n_cams, []).append(i)
            results: dict = {}
            for idx in groups.values():
                out = model.forward([chunk[i].inputs for i in idx])
                for b, i in enumerate(idx):
                    results[i] = (predictions_from_det(out.det, b),
                                  None if out.bev is None else out.bev.data[b])
            for i, smp in enumerate(chunk):
                p, bev = results[i]
                preds.append(p)
                gts.append(smp.gt)
                if with_bev and bev is not None:
                    if smp.bev is None:
                        smp.bev = bev_gt(scenes[smp.scene], smp.t_idx, model.config.map_size)
                    a, u = bev_counts(bev, smp.bev)
                    inter += a
                    union += u
                    if keep_outputs:
                        maps.append(bev)
    result = evaluate_detections(preds, gts, counts=(inter, union) if with_bev else None)
    if keep_outputs:
        return result, preds, gts, maps
    return result, preds, gts

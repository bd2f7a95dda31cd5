"""Detection and BEV segmentation metrics.

Detection follows the centre-distance convention: predictions are matched
greedily in descending score order to the nearest unmatched ground truth of
the same class in the same frame, counting as a true positive when the BEV
centre distance is strictly below the threshold. AP uses 41-point
interpolation of the precision/recall curve (recall 0, 0.025, ..., 1; the
precision at each point is the best precision at any recall at or above it).

True-positive errors pool every pair matched at the 2 m threshold. When no
pair exists every error takes the sentinel value 1.0 and ``flags`` records it.
The composite score is ``(5 * mAP + sum over the three errors of
(1 - min(1, err))) / 8``, an NDS-like number without the size and attribute
terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import CLASS_NAMES, BEV_CLASSES, Boxes, wrap_angle

THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
RECALL_POINTS = np.linspace(0.0, 1.0, 41)
ERROR_SENTINEL = 1.0


@dataclass(frozen=True)
class Predictions:
    """Scored boxes for one frame, all arrays indexed by prediction."""

    cls: np.ndarray
    score: np.ndarray
    center: np.ndarray
    yaw: np.ndarray
    velocity: np.ndarray

    def __len__(self):
        return len(self.cls)

    @classmethod
    def empty(cls) -> "Predictions":
        return cls(np.zeros(0, int), np.zeros(0), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 2)))

    def subset(self, keep) -> "Predictions":
        return Predictions(self.cls[keep], self.score[keep], self.center[keep], self.yaw[keep],
                           self.velocity[keep])


@dataclass(frozen=True)
class MatchedPair:
    frame: int
    pred: int
    gt: int
    cls: int
    dist: float


@dataclass
class EvalResult:
    ap: dict  # class name -> {threshold: AP}; classes without ground truth are absent
    mAP: float
    mATE: float
    mAVE: float
    mAOE: float
    nds: float
    iou: dict | None = None  # BEV class name -> IoU
    flags: list = field(default_factory=list)
    n_frames: int = 0

    def row(self) -> dict:
        """Flat metric columns for CSV output."""
        out = {"mAP": self.mAP, "mATE": self.mATE, "mAVE": self.mAVE, "mAOE": self.mAOE, "nds": self.nds}
        for name in CLASS_NAMES:
            for t in THRESHOLDS:
                out[f"ap_{name}_{t:g}"] = self.ap.get(name, {}).get(t, float("nan"))
        for name in BEV_CLASSES:
            out[f"iou_{name}"] = float("nan") if self.iou is None else self.iou[name]
        return out

    def to_dict(self) -> dict:
        return {
            "ap": {c: {f"{t:g}": v for t, v in d.items()} for c, d in self.ap.items()},
            "mAP": self.mAP, "mATE": self.mATE, "mAVE": self.mAVE, "mAOE": self.mAOE, "nds": self.nds,
            "iou": self.iou, "flags": list(self.flags), "n_frames": self.n_frames,
        }


def _bev_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.linalg.norm(a[:, None, :2] - b[None, :, :2], axis=-1)


def greedy_match(preds: list[Predictions], gts: list[Boxes], cls: int, threshold: float):
    """Score-ordered greedy matching for one class across frames.

    Returns ``(is_tp, scores, n_gt, pairs)`` with ``is_tp``/``scores`` in
    processing order. Ties in score are broken by frame, then prediction index.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction frames vs {len(gts)} ground-truth frames")
    entries = []
    for f, p in enumerate(preds):
        for i in np.flatnonzero(p.cls == cls):
            entries.append((-float(p.score[i]), f, int(i)))
    entries.sort()
    gt_idx = [np.flatnonzero(g.cls == cls) for g in gts]
    taken = [np.zeros(len(ix), dtype=bool) for ix in gt_idx]
    dists = [_bev_dist(p.center, g.center[ix]) if len(ix) and len(p) else None
             for p, g, ix in zip(preds, gts, gt_idx)]
    is_tp, scores, pairs = [], [], []
    for neg_score, f, i in entries:
        scores.append(-neg_score)
        d = dists[f]
        hit = False
        if d is not None:
            row = np.where(taken[f], np.inf, d[i])
            j = int(np.argmin(row))
            if row[j] < threshold:
                taken[f][j] = True
                pairs.append(MatchedPair(f, i, int(gt_idx[f][j]), cls, float(row[j])))
                hit = True
        is_tp.append(hit)
    n_gt = sum(len(ix) for ix in gt_idx)
    return np.array(is_tp, dtype=bool), np.array(scores), n_gt, pairs


def average_precision(is_tp: np.ndarray, n_gt: int) -> float:
    """41-point interpolated AP from TP flags in descending-score order."""
    if n_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    if len(is_tp) == 0:
        return 0.0
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    precision = tp / (tp + fp)
    # best precision at recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    n_pts = len(RECALL_POINTS) - 1
    # recall >= i / n_pts compared in integers, so r = 0.6 really means 3 of 5
    idx = np.searchsorted(tp * n_pts, np.arange(n_pts + 1) * n_gt, side="left")
    vals = np.where(idx < len(tp), envelope[np.minimum(idx, len(tp) - 1)], 0.0)
    return float(vals.sum() / len(RECALL_POINTS))


def detection_ap(preds: list[Predictions], gts: list[Boxes], thresholds=THRESHOLDS,
                 classes=None) -> tuple[dict, float]:
    """Per-class, per-threshold AP and their mean over classes that have ground truth."""
    classes = range(len(CLASS_NAMES)) if classes is None else classes
    ap = {}
    for c in classes:
        if sum(int(np.sum(g.cls == c)) for g in gts) == 0:
            continue
        name = CLASS_NAMES[c]
        ap[name] = {}
        for t in thresholds:
            is_tp, _, n_gt, _ = greedy_match(preds, gts, c, t)
            ap[name][t] = average_precision(is_tp, n_gt)
    vals = [v for d in ap.values() for v in d.values()]
    return ap, float(np.mean(vals)) if vals else 0.0


def tp_errors(pairs: list[MatchedPair], preds: list[Predictions], gts: list[Boxes]) -> tuple[float, float, float, bool]:
    """Mean BEV centre distance, velocity error and wrapped yaw error over matched pairs.

    Returns ``(mATE, mAVE, mAOE, empty)``; ``empty`` is True when the
    sentinel was used.
    """
    if not pairs:
        return ERROR_SENTINEL, ERROR_SENTINEL, ERROR_SENTINEL, True
    ate, ave, aoe = [], [], []
    for m in pairs:
        p, g = preds[m.frame], gts[m.frame]
        ate.append(np.linalg.norm(p.center[m.pred, :2] - g.center[m.gt, :2]))
        ave.append(np.linalg.norm(p.velocity[m.pred] - g.velocity[m.gt]))
        aoe.append(abs(float(wrap_angle(p.yaw[m.pred] - g.yaw[m.gt]))))
    return float(np.mean(ate)), float(np.mean(ave)), float(np.mean(aoe)), False


def composite_score(mAP: float, errors) -> float:
    return float((5.0 * mAP + sum(1.0 - min(1.0, e) for e in errors)) / 8.0)


def bev_iou(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Per-class IoU of ``pred >= threshold`` against binary ``gt``.

    Maps are ``(..., C, H, W)``; any leading dims are pooled. Returns
    ``(iou, empty)`` where ``empty[c]`` flags a class with an empty union
    (reported as IoU 1.0).
    """
    return iou_from_counts(*bev_counts(pred, gt, threshold))


def bev_counts(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Per-class intersection and union pixel counts, for accumulating IoU over frames."""
    p = np.asarray(pred) >= threshold
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ")
    axes = tuple(i for i in range(p.ndim) if i != p.ndim - 3)
    return np.sum(p & g, axis=axes), np.sum(p | g, axis=axes)


def iou_from_counts(inter: np.ndarray, union: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    empty = union == 0
    return np.where(empty, 1.0, inter / np.maximum(union, 1)).astype(np.float64), empty


def evaluate_detections(preds: list[Predictions], gts: list[Boxes], bev_pred=None, bev_gt=None,
                        counts=None) -> EvalResult:
    """Full metric set. BEV IoU comes from maps (``bev_pred``/``bev_gt``) or accumulated ``counts``."""
    ap, mAP = detection_ap(preds, gts)
    pairs = []
    for c in range(len(CLASS_NAMES)):
        pairs += greedy_match(preds, gts, c, TP_THRESHOLD)[3]
    ate, ave, aoe, empty = tp_errors(pairs, preds, gts)
    flags = ["no_tp_matches"] if empty else []
    iou = None
    if bev_pred is not None:
        counts = bev_counts(bev_pred, bev_gt)
    if counts is not None:
        vals, empty_cls = iou_from_counts(*counts)
        iou = {name: float(v) for name, v in zip(BEV_CLASSES, vals)}
        flags += [f"empty_union_{name}" for name, e in zip(BEV_CLASSES, empty_cls) if e]
    return EvalResult(ap, mAP, ate, ave, aoe, composite_score(mAP, (ate, ave, aoe)), iou, flags, len(preds))

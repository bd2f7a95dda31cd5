"""Detection/segmentation heads, training losses and label assignment.

Box code (the space the L1 loss and the matching cost work in), 10 values::

    x, y, z            centre in metres (lidar frame)
    log w, log h, log l
    sin yaw, cos yaw
    vx, vy             m/s in lidar axes

Decoded boxes carry the same layout with sizes exponentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .autodiff import Tensor, clip, concat, constant, sigmoid, softplus, take
from .geometry import ROI
from .hungarian import hungarian_match
from .nn import Params, init_mlp, mlp

BOX_DIM = 10
CE_CLAMP = 1e-7


@dataclass
class Detection3D:
    class_logits: Tensor  # (..., N_det, N_cls)
    box: Tensor  # (..., N_det, 10) decoded
    box_code: Tensor  # (..., N_det, 10) regression space


def init_detection_head(params: Params, rng, dim: int, n_cls: int, prefix: str = "det_head") -> None:
    init_mlp(params, f"{prefix}.cls", [dim, dim, n_cls], rng)
    init_mlp(params, f"{prefix}.reg", [dim, dim, BOX_DIM], rng)
    # start classification near the focal-loss prior of 0.01
    params[f"{prefix}.cls.1.bias"].data[:] = -np.log((1 - 0.01) / 0.01)


def inverse_sigmoid(x: Tensor, eps: float = 1e-5) -> Tensor:
    x = clip(x, eps, 1.0 - eps)
    return x.log() - (1.0 - x).log()


def detection_head(det_embeds: Tensor, params: Params, anchors: Tensor, roi: ROI, prefix: str = "det_head") -> Detection3D:
    """Parallel classification and regression branches.

    The centre is ``sigmoid(logit(anchor) + offset)`` in the normalised ROI
    cube mapped back to metres; sizes are ``exp`` of the regressed log-size.
    """
    logits = mlp(params, f"{prefix}.cls", det_embeds, 2)
    raw = mlp(params, f"{prefix}.reg", det_embeds, 2)
    lead = raw.shape[:-1]
    center_n = sigmoid(raw[..., 0:3] + inverse_sigmoid(anchors))
    center = center_n * constant(roi.extent) + constant(roi.lo)
    log_size = raw[..., 3:6]
    rest = raw[..., 6:10]
    code = concat([center, log_size, rest], axis=len(lead))
    box = concat([center, log_size.exp(), rest], axis=len(lead))
    return Detection3D(logits, box, code)


def encode_boxes(center, size, yaw, velocity) -> np.ndarray:
    """Ground-truth boxes to the 10-value code."""
    center = np.asarray(center, dtype=np.float64).reshape(-1, 3)
    return np.concatenate([
        center, np.log(np.asarray(size, dtype=np.float64).reshape(-1, 3)),
        np.sin(yaw).reshape(-1, 1), np.cos(yaw).reshape(-1, 1),
        np.asarray(velocity, dtype=np.float64).reshape(-1, 2),
    ], axis=1)


def decode_yaw(code: np.ndarray) -> np.ndarray:
    return np.arctan2(code[..., 6], code[..., 7])


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


def init_segmentation_head(params: Params, rng, dim: int, n_cls: int, patch_h: int, patch_w: int,
                           prefix: str = "seg_head") -> None:
    init_mlp(params, f"{prefix}.mlp", [dim, dim, n_cls * patch_h * patch_w], rng)


def assemble_patches(patches, grid: tuple):
    """``(..., N_seg, C, ph, pw)`` row-major patches -> ``(..., C, gh*ph, gw*pw)``.

    Works on numpy arrays and on Tensors.
    """
    gh, gw = grid
    s = patches.shape
    lead = s[:-4]
    n_seg, c, ph, pw = s[-4:]
    if n_seg != gh * gw:
        raise ValueError(f"{n_seg} patches do not fill a {gh}x{gw} grid")
    k = len(lead)
    x = patches.reshape(*lead, gh, gw, c, ph, pw)
    perm = tuple(range(k)) + (k + 2, k, k + 3, k + 1, k + 4)
    x = np.transpose(x, perm) if isinstance(x, np.ndarray) else x.transpose(*perm)
    return x.reshape(*lead, c, gh * ph, gw * pw)


def partition_map(bev, patch_h: int, patch_w: int):
    """Inverse of :func:`assemble_patches`."""
    s = bev.shape
    lead = s[:-3]
    c, hgt, wid = s[-3:]
    if hgt % patch_h or wid % patch_w:
        raise ValueError(f"patch {patch_h}x{patch_w} does not tile a {hgt}x{wid} map")
    gh, gw = hgt // patch_h, wid // patch_w
    k = len(lead)
    x = bev.reshape(*lead, c, gh, patch_h, gw, patch_w)
    perm = tuple(range(k)) + (k + 1, k + 3, k, k + 2, k + 4)
    x = np.transpose(x, perm) if isinstance(x, np.ndarray) else x.transpose(*perm)
    return x.reshape(*lead, gh * gw, c, patch_h, patch_w)


def segmentation_head(seg_embeds: Tensor, params: Params, patch_h: int, patch_w: int, map_size: int,
                      n_cls: int = 3, prefix: str = "seg_head") -> Tensor:
    """Each query's embedding -> one sigmoid patch; patches tiled row-major."""
    if map_size % patch_h or map_size % patch_w:
        raise ValueError(f"patch {patch_h}x{patch_w} does not tile a {map_size} map")
    grid = (map_size // patch_h, map_size // patch_w)
    n_seg = seg_embeds.shape[-2]
    if n_seg != grid[0] * grid[1]:
        raise ValueError(f"{n_seg} queries cannot fill a {grid[0]}x{grid[1]} patch grid")
    out = sigmoid(mlp(params, f"{prefix}.mlp", seg_embeds, 2))
    if out.shape[-1] != n_cls * patch_h * patch_w:
        raise ValueError(f"head width {out.shape[-1]} != {n_cls}*{patch_h}*{patch_w}")
    patches = out.reshape(*out.shape[:-1], n_cls, patch_h, patch_w)
    return assemble_patches(patches, grid)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def positive_weights(gt: np.ndarray, omega_max: float = 100.0) -> np.ndarray:
    """Per-class ``N_neg / N_pos`` over everything but the class axis (-3), capped."""
    g = np.asarray(gt)
    axes = tuple(i for i in range(g.ndim) if i != g.ndim - 3)
    pos = g.sum(axis=axes)
    neg = g.size / g.shape[-3] - pos
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(pos > 0, neg / np.maximum(pos, 1), omega_max)
    return np.minimum(w, omega_max)


def weighted_ce_loss(pred: Tensor, gt: np.ndarray, omega_max: float = 100.0, per_class: bool = True) -> Tensor:
    """Positive-reweighted binary cross-entropy over BEV maps ``(..., C, H, W)``.

    ``loss = -mean(w_c * g * log y + (1 - g) * log(1 - y))`` with ``y``
    clamped to ``[1e-7, 1 - 1e-7]`` and ``w_c = N_neg / N_pos`` per class
    (or one pooled ratio when ``per_class`` is False).
    """
    g = np.asarray(gt, dtype=np.float64)
    if pred.shape != g.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {g.shape} differ")
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("ground truth must be binary")
    if per_class:
        w = positive_weights(g, omega_max)
    else:
        pos = g.sum()
        w = np.full(g.shape[-3], min(omega_max, (g.size - pos) / pos) if pos else omega_max)
    wmap = np.broadcast_to(w[:, None, None], g.shape[-3:])
    wmap = np.broadcast_to(wmap, g.shape)
    y = clip(pred, CE_CLAMP, 1.0 - CE_CLAMP)
    pos_term = constant(wmap * g) * y.log()
    neg_term = constant(1.0 - g) * (1.0 - y).log()
    return -(pos_term + neg_term).mean()


def focal_loss(class_logits: Tensor, targets, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Sigmoid focal loss; ``targets == n_cls`` marks background.

    Summed over classes, averaged over queries (and any batch dims).
    """
    n_cls = class_logits.shape[-1]
    t = np.asarray(targets)
    if t.shape != class_logits.shape[:-1]:
        raise ValueError(f"targets {t.shape} do not match logits {class_logits.shape[:-1]}")
    if t.size and (t.min() < 0 or t.max() > n_cls or not np.issubdtype(t.dtype, np.integer)):
        raise ValueError(f"target indices must be integers in [0, {n_cls}]")
    onehot = np.zeros(class_logits.shape)
    np.put_along_axis(onehot, np.minimum(t, n_cls - 1)[..., None], (t < n_cls)[..., None].astype(float), axis=-1)
    p = sigmoid(class_logits)
    pos = constant(alpha * onehot) * (1.0 - p) ** gamma * softplus(-class_logits)
    neg = constant((1.0 - alpha) * (1.0 - onehot)) * p ** gamma * softplus(class_logits)
    n_queries = int(np.prod(class_logits.shape[:-1]))
    return (pos + neg).sum() * (1.0 / max(n_queries, 1))


def l1_box_loss(pred_codes: Tensor, gt_codes: np.ndarray, assignment) -> Tensor:
    """Mean absolute error over matched pairs and all 10 code dims.

    ``pred_codes`` is ``(N_pred, 10)``; with no matched pairs the loss is a
    constant 0 (no gradient).
    """
    pairs = list(assignment)
    if not pairs:
        return constant(0.0)
    pi = [i for i, _ in pairs]
    gi = [j for _, j in pairs]
    diff = take(pred_codes, pi, axis=0) - constant(np.asarray(gt_codes)[gi])
    return diff.abs().mean()


def match_cost(cls_prob: np.ndarray, pred_codes: np.ndarray, gt_cls: np.ndarray, gt_codes: np.ndarray,
               w_cls: float = 1.0, w_box: float = 5.0) -> np.ndarray:
    """``w_cls * (-p[matched class]) + w_box * mean |code diff|``, shape ``(N_pred, N_gt)``."""
    gt_cls = np.asarray(gt_cls, dtype=int)
    cls_cost = -np.asarray(cls_prob)[:, gt_cls]
    box_cost = np.abs(np.asarray(pred_codes)[:, None, :] - np.asarray(gt_codes)[None, :, :]).mean(axis=-1)
    return w_cls * cls_cost + w_box * box_cost


def match(det: Detection3D, gt_cls, gt_codes, w_cls: float = 1.0, w_box: float = 5.0, batch_index=None):
    """Hungarian assignment between one sample's predictions and its ground truth."""
    if len(gt_cls) == 0:
        return []
    logits = det.class_logits.data if batch_index is None else det.class_logits.data[batch_index]
    codes = det.box_code.data if batch_index is None else det.box_code.data[batch_index]
    cost = match_cost(expit(logits), codes, gt_cls, gt_codes, w_cls, w_box)
    return hungarian_match(cost)

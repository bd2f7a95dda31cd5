"""3D position embeddings from frustum coordinates, optionally feature-guided.

Tensors follow the ``(..., C, H_f, W_f)`` layout at the interface; any
leading dimensions (batch, camera) are carried through. Key/value tokens come
out as ``(..., n_tokens, C)`` with the current frame first, then the previous
frame; inside a frame tokens are camera-major, then row-major over the
feature map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, sigmoid
from .geometry import Coords3D
from .nn import Params, init_linear, init_mlp, linear, mlp

FRAME_TAGS = ("t", "t-1")


@dataclass(frozen=True)
class FeatureMap:
    tensor: Tensor  # (..., N_cams, C_in, H_f, W_f)
    frame: str = "t"

    @property
    def spatial(self) -> tuple:
        return self.tensor.shape[-2:]


@dataclass(frozen=True)
class PosEmbed3D:
    tensor: Tensor  # (..., N_cams, C, H_f, W_f)
    frame: str = "t"


def init_posembed_params(params: Params, rng: np.random.Generator, in_channels: int, embed_dim: int,
                         num_depths: int, prefix: str = "pe") -> Params:
    """psi: 3D -> 4C -> C; xi: C -> C -> C; proj: 1x1 conv C_in -> C."""
    init_mlp(params, f"{prefix}.psi", [3 * num_depths, 4 * embed_dim, embed_dim], rng)
    init_mlp(params, f"{prefix}.xi", [embed_dim, embed_dim, embed_dim], rng)
    init_linear(params, f"{prefix}.proj", in_channels, embed_dim, rng)
    return params


def _channels_last(t: Tensor) -> Tensor:
    n = t.ndim
    return t.transpose(*range(n - 3), n - 2, n - 1, n - 3)


def _channels_first(t: Tensor) -> Tensor:
    n = t.ndim
    return t.transpose(*range(n - 3), n - 1, n - 3, n - 2)


def project_features(feats: FeatureMap, params: Params, prefix: str = "pe") -> Tensor:
    """Shared 1x1 projection; returns channels-last ``(..., H_f, W_f, C)``."""
    return linear(params, f"{prefix}.proj", _channels_last(feats.tensor))


def _psi(coords: Coords3D, params: Params, prefix: str) -> Tensor:
    pts = np.asarray(coords.points)
    width = params[f"{prefix}.psi.0.weight"].shape[0]
    if pts.shape[-1] != 3 or pts.shape[-2] * 3 != width:
        raise ValueError(f"coords with {pts.shape[-2]} depth bins do not match psi input width {width}")
    flat = Tensor(pts.reshape(pts.shape[:-2] + (pts.shape[-2] * 3,)))
    return mlp(params, f"{prefix}.psi", flat, 2)


def pe_from_coords(coords: Coords3D, params: Params, prefix: str = "pe", frame: str = "t") -> PosEmbed3D:
    """Plain position embedding: an MLP over each location's flattened depth column."""
    if not coords.normalized:
        raise ValueError("pe_from_coords expects normalised coordinates")
    return PosEmbed3D(_channels_first(_psi(coords, params, prefix)), frame)


def fpe_weights(feats: FeatureMap, params: Params, prefix: str = "pe") -> Tensor:
    """Sigmoid attention weights from projected features, channels-last."""
    return sigmoid(mlp(params, f"{prefix}.xi", project_features(feats, params, prefix), 2))


def feature_guided_pe(feats: FeatureMap, coords: Coords3D, params: Params, prefix: str = "pe") -> PosEmbed3D:
    """Position embedding reweighted elementwise by weights derived from the image features."""
    if not coords.normalized:
        raise ValueError("feature_guided_pe expects normalised coordinates")
    if tuple(feats.spatial) != tuple(coords.points.shape[-4:-2]):
        raise ValueError(f"feature map {feats.spatial} and coords {coords.points.shape[-4:-2]} are not aligned")
    w = fpe_weights(feats, params, prefix)
    pe = _psi(coords, params, prefix)
    if w.shape != pe.shape:
        raise ValueError(f"attention weights {w.shape} and embedding {pe.shape} differ")
    return PosEmbed3D(_channels_first(w * pe), feats.frame)


def _tokens(t: Tensor) -> Tensor:
    """``(..., N, H, W, C)`` -> ``(..., N*H*W, C)``."""
    s = t.shape
    return t.reshape(*s[:-4], s[-4] * s[-3] * s[-2], s[-1])


def build_key_value(feats_t: FeatureMap, feats_prev: FeatureMap | None, pe_t: PosEmbed3D,
                    pe_prev: PosEmbed3D | None, params: Params, prefix: str = "pe") -> tuple[Tensor, Tensor]:
    """Keys are projected features plus PE, values are the projected features.

    Pass ``None`` for both previous-frame arguments to build single-frame
    tokens.
    """
    pairs = [(feats_t, pe_t)]
    if (feats_prev is None) != (pe_prev is None):
        raise ValueError("previous-frame features and embedding must be given together")
    if feats_prev is not None:
        if feats_prev.tensor.shape != feats_t.tensor.shape:
            raise ValueError(f"frame shapes differ: {feats_t.tensor.shape} vs {feats_prev.tensor.shape}")
        pairs.append((feats_prev, pe_prev))
    keys, values = [], []
    for f, pe in pairs:
        if f.frame != pe.frame:
            raise ValueError(f"feature frame {f.frame!r} paired with embedding frame {pe.frame!r}")
        v = project_features(f, params, prefix)
        p = _channels_last(pe.tensor)
        if p.shape != v.shape:
            raise ValueError(f"embedding {p.shape} does not match projected features {v.shape}")
        values.append(_tokens(v))
        keys.append(_tokens(v + p))
    axis = values[0].ndim - 2
    if len(values) == 1:
        return keys[0], values[0]
    return concat(keys, axis=axis), concat(values, axis=axis)

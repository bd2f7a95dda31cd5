"""Query initialisation and the transformer decoder.

Detection queries come from learnable 3D anchors in the normalised ROI cube;
segmentation queries come from fixed BEV patch centres. Both are embedded by
a sinusoidal featurisation followed by a two-layer MLP, and the embedding is
re-added to the query content at every decoder layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, constant, cos, parameter, sin, softmax
from .nn import Params, affine_layer_norm, init_layer_norm, init_linear, init_mlp, linear, mlp

DEFAULT_FREQS = 8


def sinusoidal(points: Tensor, num_freqs: int) -> Tensor:
    """``(N, k)`` points in [0, 1] -> ``(N, 2 * k * num_freqs)`` features: all sines, then all cosines."""
    freqs = np.pi * 2.0 ** np.arange(num_freqs)
    k = points.shape[-1]
    # block-diagonal frequency matrix: column i*F + f holds freqs[f] for coordinate i
    fmat = np.kron(np.eye(k), freqs[None, :])
    ang = points @ constant(fmat)
    return concat([sin(ang), cos(ang)], axis=ang.ndim - 1)


@dataclass
class DetQuerySet:
    anchors: Tensor  # (N_det, 3), learnable
    params: Params  # embedding MLP under "det_query.embed"
    num_freqs: int = DEFAULT_FREQS

    @property
    def n(self) -> int:
        return self.anchors.shape[0]

    def embeddings(self) -> Tensor:
        return mlp(self.params, "det_query.embed", sinusoidal(self.anchors, self.num_freqs), 2)

    def all_params(self) -> Params:
        return {"det_query.anchors": self.anchors, **self.params}


def init_det_queries(n: int, seed: int, embed_dim: int = 64, num_freqs: int = DEFAULT_FREQS,
                     lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> DetQuerySet:
    """Anchors drawn uniformly in the sub-box ``[lo, hi]`` of the unit cube (default: all of it)."""
    if n < 1:
        raise ValueError("need at least one detection query")
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(lo < 0) or np.any(hi > 1) or np.any(hi < lo):
        raise ValueError(f"anchor box {lo}..{hi} must lie inside the unit cube")
    rng = np.random.default_rng(seed)
    anchors = parameter(rng.uniform(lo, hi, (n, 3)), "det_query.anchors")
    params: Params = {}
    init_mlp(params, "det_query.embed", [6 * num_freqs, embed_dim, embed_dim], rng)
    return DetQuerySet(anchors, params, num_freqs)


@dataclass
class SegQuerySet:
    anchors: np.ndarray  # (N_seg, 2) fixed, row-major patch order, (x, y) normalised
    params: Params
    grid: tuple  # (patches along x / map rows, patches along y / map cols)
    patch: tuple  # (patch_h, patch_w) in map pixels
    num_freqs: int = DEFAULT_FREQS

    @property
    def n(self) -> int:
        return self.anchors.shape[0]

    def embeddings(self) -> Tensor:
        return mlp(self.params, "seg_query.embed", sinusoidal(constant(self.anchors), self.num_freqs), 2)

    def all_params(self) -> Params:
        return dict(self.params)


def seg_anchor_grid(map_size: int, patch_h: int, patch_w: int) -> np.ndarray:
    if patch_h < 1 or patch_w < 1 or map_size % patch_h or map_size % patch_w:
        raise ValueError(f"patch {patch_h}x{patch_w} does not tile a {map_size} map")
    gh, gw = map_size // patch_h, map_size // patch_w
    r, c = np.meshgrid((np.arange(gh) + 0.5) / gh, (np.arange(gw) + 0.5) / gw, indexing="ij")
    return np.stack([r.reshape(-1), c.reshape(-1)], axis=1)


def init_seg_queries(map_size: int, patch_h: int, patch_w: int, embed_dim: int = 64, seed: int = 0,
                     num_freqs: int = DEFAULT_FREQS) -> SegQuerySet:
    """One query per BEV patch, anchored at the patch centre."""
    anchors = seg_anchor_grid(map_size, patch_h, patch_w)
    rng = np.random.default_rng(seed)
    params: Params = {}
    init_mlp(params, "seg_query.embed", [4 * num_freqs, embed_dim, embed_dim], rng)
    return SegQuerySet(anchors, params, (map_size // patch_h, map_size // patch_w), (patch_h, patch_w), num_freqs)


@dataclass
class DecoderStack:
    params: Params
    n_layers: int
    n_heads: int
    dim: int
    prefix: str = "decoder"
    # attention maps of the last forward pass, filled when record=True
    attention_maps: list = field(default_factory=list)
    record: bool = False


def init_decoder(n_layers: int = 3, n_heads: int = 4, dim: int = 64, seed: int = 0, ffn_mult: int = 2,
                 prefix: str = "decoder") -> DecoderStack:
    if dim % n_heads:
        raise ValueError(f"embedding dim {dim} not divisible by {n_heads} heads")
    rng = np.random.default_rng(seed)
    p: Params = {}
    for l in range(n_layers):
        base = f"{prefix}.{l}"
        for attn in ("self_attn", "cross_attn"):
            for proj in ("q", "k", "v", "o"):
                init_linear(p, f"{base}.{attn}.{proj}", dim, dim, rng)
        init_mlp(p, f"{base}.ffn", [dim, ffn_mult * dim, dim], rng)
        for i in (1, 2, 3):
            init_layer_norm(p, f"{base}.norm{i}", dim)
    return DecoderStack(p, n_layers, n_heads, dim, prefix)


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, n, c = x.shape
    return x.reshape(b, n, h, c // h).transpose(0, 2, 1, 3)


def multi_head_attention(params: Params, name: str, q_in: Tensor, k_in: Tensor, v_in: Tensor, n_heads: int,
                         record: list | None = None) -> Tensor:
    """Scaled dot-product attention on ``(B, N, C)`` inputs."""
    b, nq, c = q_in.shape
    if k_in.shape[-1] != c or v_in.shape[-1] != c:
        raise ValueError(f"{name}: key/value width {k_in.shape[-1]}/{v_in.shape[-1]} != query width {c}")
    if k_in.shape[:-1] != v_in.shape[:-1]:
        raise ValueError(f"{name}: keys {k_in.shape} and values {v_in.shape} disagree")
    d = c // n_heads
    q = _split_heads(linear(params, f"{name}.q", q_in), n_heads)
    k = _split_heads(linear(params, f"{name}.k", k_in), n_heads)
    v = _split_heads(linear(params, f"{name}.v", v_in), n_heads)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d))
    attn = softmax(scores, axis=-1)
    if record is not None:
        record.append((name, attn.data.copy()))
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, nq, c)
    return linear(params, f"{name}.o", out)


def decoder_layer(stack: DecoderStack, l: int, x: Tensor, pos: Tensor, keys: Tensor, values: Tensor) -> Tensor:
    p = stack.params
    base = f"{stack.prefix}.{l}"
    rec = stack.attention_maps if stack.record else None
    q = x + pos
    x = affine_layer_norm(p, f"{base}.norm1", x + multi_head_attention(p, f"{base}.self_attn", q, q, x, stack.n_heads, rec))
    x = affine_layer_norm(p, f"{base}.norm2", x + multi_head_attention(p, f"{base}.cross_attn", x + pos, keys, values,
                                                                       stack.n_heads, rec))
    return affine_layer_norm(p, f"{base}.norm3", x + mlp(p, f"{base}.ffn", x, 2))


def run_stack(stack: DecoderStack, x: Tensor, pos: Tensor, keys: Tensor, values: Tensor) -> list[Tensor]:
    """Outputs after each layer; ``[x]`` when the stack is empty."""
    outs = []
    for l in range(stack.n_layers):
        x = decoder_layer(stack, l, x, pos, keys, values)
        outs.append(x)
    return outs or [x]


def _batched(t: Tensor) -> Tensor:
    return t.reshape(1, *t.shape) if t.ndim == 2 else t


def decode(det: DetQuerySet | None, seg: SegQuerySet | None, keys: Tensor, values: Tensor, stack: DecoderStack,
           seg_stack: DecoderStack | None = None, all_layers: bool = False):
    """Update detection and segmentation queries against the key/value tokens.

    With one shared stack the two query families form one sequence for
    self-attention. ``keys``/``values`` may be ``(N_tok, C)`` or
    ``(B, N_tok, C)``; outputs follow the same batching. With
    ``all_layers=True`` each output is a list with one entry per layer.
    """
    unbatched = keys.ndim == 2
    keys, values = _batched(keys), _batched(values)
    if keys.shape[-1] != stack.dim:
        raise ValueError(f"token width {keys.shape[-1]} != decoder width {stack.dim}")
    bsz = keys.shape[0]
    stack.attention_maps.clear()

    def init(qs):
        e = qs.embeddings()
        return constant(np.zeros((bsz,) + e.shape)) + e, e

    families = [q for q in (det, seg) if q is not None]
    if not families:
        raise ValueError("decode needs at least one query family")
    results = {}
    if seg_stack is None or det is None or seg is None:
        xs, ps = zip(*(init(q) for q in families))
        x = concat(list(xs), axis=1) if len(xs) > 1 else xs[0]
        pos = concat(list(ps), axis=0) if len(ps) > 1 else ps[0]
        outs = run_stack(stack, x, pos, keys, values)
        start = 0
        for q in families:
            results[id(q)] = [o[:, start:start + q.n] for o in outs]
            start += q.n
    else:
        seg_stack.attention_maps.clear()
        for q, st in ((det, stack), (seg, seg_stack)):
            x, pos = init(q)
            results[id(q)] = run_stack(st, x, pos, keys, values)

    def finish(q):
        if q is None:
            return None
        outs = results[id(q)]
        if unbatched:
            outs = [o.reshape(*o.shape[1:]) for o in outs]
        return outs if all_layers else outs[-1]

    return finish(det), finish(seg)

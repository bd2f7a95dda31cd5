"""The full multi-view perception model: encoder, 3D position embedding, decoder, heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, constant, relu
from .data import ModelInput
from .decoder import DetQuerySet, DecoderStack, SegQuerySet, decode, init_decoder, init_det_queries, init_seg_queries
from .geometry import (ROI, Coords3D, DepthSpec, align_coords, make_frustum_grid, normalize_coords,
                       unproject_to_lidar)
from .heads import Detection3D, detection_head, init_detection_head, init_segmentation_head, segmentation_head
from .nn import Params, init_linear, linear
from .posembed import FeatureMap, PosEmbed3D, build_key_value, feature_guided_pe, init_posembed_params, pe_from_coords
from .scene import BEV_CLASSES, CLASS_NAMES


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    n_layers: int = 3
    n_heads: int = 4
    ffn_mult: int = 2
    n_det: int = 32
    n_cls: int = len(CLASS_NAMES)
    enc_channels: tuple = (16, 32, 64)
    enc_strides: tuple = (4, 2, 2)
    depth_near: float = 1.0
    depth_far: float = 60.0
    depth_num: int = 64
    depth_mode: str = "linear"
    roi: tuple = tuple(ROI().to_list())
    # metric box (xmin, xmax, ymin, ymax, zmin, zmax) the anchors start in; empty = whole ROI
    anchor_init: tuple = ()
    use_fpe: bool = True
    use_ca: bool = True
    single_frame: bool = False
    seg: bool = True
    patch_h: int = 32
    patch_w: int = 32
    map_size: int = 256
    shared_decoder: bool = True
    num_freqs: int = 8
    seed: int = 0

    def __post_init__(self):
        if len(self.enc_channels) != len(self.enc_strides) or not self.enc_strides:
            raise ModelConfigError("encoder channels and strides must have the same non-zero length")
        if self.embed_dim % self.n_heads:
            raise ModelConfigError(f"embed_dim {self.embed_dim} not divisible by {self.n_heads} heads")
        if min(self.embed_dim, self.n_heads, self.n_det, self.n_cls, self.depth_num) < 1 or self.n_layers < 0:
            raise ModelConfigError("sizes must be positive")
        if self.seg and (self.map_size % self.patch_h or self.map_size % self.patch_w):
            raise ModelConfigError(f"patch {self.patch_h}x{self.patch_w} does not tile a {self.map_size} map")
        ROI.from_list(self.roi)
        if self.anchor_init:
            if len(self.anchor_init) != 6:
                raise ModelConfigError("anchor_init needs six numbers (xmin, xmax, ymin, ymax, zmin, zmax)")
            self.anchor_box()
        DepthSpec(self.depth_near, self.depth_far, self.depth_num, self.depth_mode).depths()

    @property
    def stride(self) -> int:
        return int(np.prod(self.enc_strides))

    @property
    def roi_box(self) -> ROI:
        return ROI.from_list(self.roi)

    def anchor_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Anchor initialisation box in normalised ROI coordinates."""
        if not self.anchor_init:
            return np.zeros(3), np.ones(3)
        roi = self.roi_box
        a = np.asarray(self.anchor_init, dtype=np.float64)
        lo = (a[0::2] - roi.lo) / roi.extent
        hi = (a[1::2] - roi.lo) / roi.extent
        if np.any(lo < 0) or np.any(hi > 1) or np.any(hi < lo):
            raise ModelConfigError("anchor_init must be an ordered box inside the ROI")
        return lo, hi

    @property
    def depth_spec(self) -> DepthSpec:
        return DepthSpec(self.depth_near, self.depth_far, self.depth_num, self.depth_mode)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = cls.__dataclass_fields__
        unknown = set(d) - set(names)
        if unknown:
            raise ModelConfigError(f"unknown model options {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class ModelOutput:
    det: Detection3D  # final layer, (B, N_det, ...)
    det_layers: list  # one Detection3D per decoder layer
    bev: Tensor | None  # (B, 3, M, M) post-sigmoid
    n_tokens: int = 0


# ---------------------------------------------------------------------------
# image encoder
# ---------------------------------------------------------------------------


def init_encoder(params: Params, rng, channels, strides, in_channels: int = 1, prefix: str = "encoder") -> None:
    c_in = in_channels
    for i, (c, s) in enumerate(zip(channels, strides)):
        init_linear(params, f"{prefix}.{i}", s * s * c_in, c, rng, gain=np.sqrt(2.0))
        c_in = c


def patchify(x: Tensor, k: int) -> Tensor:
    """``(M, H, W, C)`` -> ``(M, H/k, W/k, k*k*C)`` non-overlapping patches."""
    m, h, w, c = x.shape
    if h % k or w % k:
        raise ValueError(f"{h}x{w} input not divisible by stride {k}")
    x = x.reshape(m, h // k, k, w // k, k, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(m, h // k, w // k, k * k * c)


def encode_images(params: Params, images, strides, prefix: str = "encoder") -> Tensor:
    """Strided convolutions with kernel == stride, each followed by ReLU.

    ``images`` is ``(M, H, W)``; the result is channels-last ``(M, H_f, W_f, C)``.
    """
    x = images if isinstance(images, Tensor) else constant(np.asarray(images, dtype=np.float64))
    x = x.reshape(*x.shape, 1)
    for i, s in enumerate(strides):
        x = relu(linear(params, f"{prefix}.{i}", patchify(x, s)))
    return x


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class PerceptionModel:
    config: ModelConfig
    params: Params = field(default_factory=dict)
    det_queries: DetQuerySet | None = None
    seg_queries: SegQuerySet | None = None
    decoder: DecoderStack | None = None
    seg_decoder: DecoderStack | None = None

    @classmethod
    def create(cls, config: ModelConfig) -> "PerceptionModel":
        c = config
        rng = np.random.default_rng(c.seed)
        p: Params = {}
        init_encoder(p, rng, c.enc_channels, c.enc_strides)
        init_posembed_params(p, rng, c.enc_channels[-1], c.embed_dim, c.depth_num)
        det = init_det_queries(c.n_det, int(rng.integers(2**31)), c.embed_dim, c.num_freqs, *c.anchor_box())
        dec = init_decoder(c.n_layers, c.n_heads, c.embed_dim, int(rng.integers(2**31)), c.ffn_mult)
        init_detection_head(p, rng, c.embed_dim, c.n_cls)
        seg = seg_dec = None
        if c.seg:
            seg = init_seg_queries(c.map_size, c.patch_h, c.patch_w, c.embed_dim, int(rng.integers(2**31)),
                                   c.num_freqs)
            init_segmentation_head(p, rng, c.embed_dim, len(BEV_CLASSES), c.patch_h, c.patch_w)
            if not c.shared_decoder:
                seg_dec = init_decoder(c.n_layers, c.n_heads, c.embed_dim, int(rng.integers(2**31)), c.ffn_mult,
                                       prefix="seg_decoder")
        # the query sets and decoders keep their own dicts; share the same tensors here
        p.update(det.all_params())
        p.update(dec.params)
        if seg is not None:
            p.update(seg.all_params())
        if seg_dec is not None:
            p.update(seg_dec.params)
        return cls(c, p, det, seg, dec, seg_dec)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    # -- geometry --------------------------------------------------------

    def feature_shape(self, image_h: int, image_w: int) -> tuple[int, int]:
        s = self.config.stride
        if image_h % s or image_w % s:
            raise ValueError(f"image {image_h}x{image_w} not divisible by total stride {s}")
        return image_h // s, image_w // s

    def coords(self, inp: ModelInput) -> tuple[np.ndarray, np.ndarray | None]:
        """Normalised frustum coordinates ``(N_cams, H_f, W_f, D, 3)`` for both frames.

        Previous-frame points are moved into lidar@t when alignment is on;
        with it off they are used as if they were already in lidar@t.
        """
        c = self.config
        hf, wf = self.feature_shape(*inp.images_t.shape[-2:])
        grid = make_frustum_grid(wf, hf, c.stride, c.depth_spec)
        roi = c.roi_box
        cur = [unproject_to_lidar(grid, k, e) for k, e in zip(inp.intrinsics, inp.ext_t)]
        cur_n = np.stack([normalize_coords(x, roi).points for x in cur])
        if c.single_frame or inp.images_prev is None:
            return cur_n, None
        frame_t = cur[0].frame
        prev = []
        for k, e in zip(inp.intrinsics, inp.ext_prev):
            x = unproject_to_lidar(grid, k, e)
            x = align_coords(x, inp.rel) if c.use_ca else Coords3D(x.points, frame_t)
            if x.frame != frame_t:
                raise ValueError(f"previous-frame coords ended in {x.frame}, expected {frame_t}")
            prev.append(normalize_coords(x, roi).points)
        return cur_n, np.stack(prev)

    # -- forward ---------------------------------------------------------

    def _pe(self, feats: FeatureMap, coords: np.ndarray) -> PosEmbed3D:
        cd = Coords3D(coords, "lidar", normalized=True)
        if self.config.use_fpe:
            return feature_guided_pe(feats, cd, self.params)
        return pe_from_coords(cd, self.params, frame=feats.frame)

    def forward(self, inputs: list[ModelInput], record_attention: bool = False) -> ModelOutput:
        c = self.config
        if not inputs:
            raise ValueError("empty batch")
        two_frame = not c.single_frame
        if two_frame and any(i.images_prev is None for i in inputs):
            raise ValueError("two-frame model needs previous-frame images")
        n_cams = inputs[0].n_cams
        if any(i.n_cams != n_cams for i in inputs):
            raise ValueError("every sample in a batch must have the same cameras")
        bsz = len(inputs)
        n_frames = 2 if two_frame else 1

        imgs = np.stack([np.stack([i.images_t, i.images_prev] if two_frame else [i.images_t]) for i in inputs])
        h, w = imgs.shape[-2:]
        feat = encode_images(self.params, imgs.reshape(-1, h, w), c.enc_strides)
        hf, wf, cin = feat.shape[1:]
        feat = feat.reshape(bsz, n_frames, n_cams, hf, wf, cin).transpose(0, 1, 2, 5, 3, 4)
        zero = np.ones((bsz, 1, n_cams, 1, 1, 1))
        for b, i in enumerate(inputs):
            zero[b, 0, list(i.zero_cams)] = 0.0
        if not zero.all():
            feat = feat * constant(np.broadcast_to(zero, feat.shape).copy())

        coords = [self.coords(i) for i in inputs]
        f_t = FeatureMap(feat[:, 0], "t")
        pe_t = self._pe(f_t, np.stack([x[0] for x in coords]))
        f_p = pe_p = None
        if two_frame:
            f_p = FeatureMap(feat[:, 1], "t-1")
            pe_p = self._pe(f_p, np.stack([x[1] for x in coords]))
        keys, values = build_key_value(f_t, f_p, pe_t, pe_p, self.params)

        self.decoder.record = record_attention
        det_l, seg_l = decode(self.det_queries, self.seg_queries, keys, values, self.decoder, self.seg_decoder,
                              all_layers=True)
        dets = [detection_head(e, self.params, self.det_queries.anchors, c.roi_box) for e in det_l]
        bev = None
        if seg_l is not None:
            bev = segmentation_head(seg_l[-1], self.params, c.patch_h, c.patch_w, c.map_size, len(BEV_CLASSES))
        return ModelOutput(dets[-1], dets, bev, keys.shape[1])

import numpy as np
import pytest

from mv3d.autodiff import Tensor, concat, constant, grad_check, parameter
from mv3d.decoder import (decode, init_decoder, init_det_queries, init_seg_queries, seg_anchor_grid, sinusoidal)
from mv3d.geometry import Coords3D
from mv3d.posembed import (FeatureMap, build_key_value, feature_guided_pe, fpe_weights, init_posembed_params,
                           pe_from_coords)


def _coords(shape, seed=0):
    pts = np.random.default_rng(seed).uniform(0, 1, shape + (3,))
    return Coords3D(pts, "lidar@0", normalized=True)


def _setup(n_cams=2, c_in=3, c=4, h=2, w=3, d=2, seed=0):
    rng = np.random.default_rng(seed)
    params = init_posembed_params({}, rng, c_in, c, d)
    feats = FeatureMap(parameter(rng.normal(size=(n_cams, c_in, h, w))), "t")
    coords = _coords((n_cams, h, w, d), seed + 1)
    return params, feats, coords


def test_fpe_is_weighted_plain_pe():
    params, feats, coords = _setup()
    plain = pe_from_coords(coords, params).tensor.data
    fpe = feature_guided_pe(feats, coords, params).tensor.data
    w = np.moveaxis(fpe_weights(feats, params).data, -1, -3)
    assert np.all((w > 0) & (w < 1))
    np.testing.assert_allclose(fpe, w * plain, atol=1e-12)


def test_pe_depends_only_on_own_location():
    params, _, coords = _setup()
    base = pe_from_coords(coords, params).tensor.data
    pts = coords.points.copy()
    pts[1, 0, 2] += 0.1
    moved = pe_from_coords(Coords3D(pts, coords.frame, normalized=True), params).tensor.data
    diff = np.abs(moved - base).sum(axis=1)  # (cams, h, w)
    assert diff[1, 0, 2] > 0
    diff[1, 0, 2] = 0
    assert diff.max() == 0


def test_unnormalised_coords_rejected():
    params, feats, coords = _setup()
    raw = Coords3D(coords.points, coords.frame)
    with pytest.raises(ValueError):
        pe_from_coords(raw, params)
    with pytest.raises(ValueError):
        feature_guided_pe(feats, raw, params)


def test_key_value_layout():
    params, feats, coords = _setup()
    pe_t = feature_guided_pe(feats, coords, params)
    prev = FeatureMap(feats.tensor, "t-1")
    pe_p = feature_guided_pe(prev, _coords((2, 2, 3, 2), 5), params)
    keys, values = build_key_value(feats, prev, pe_t, pe_p, params)
    assert keys.shape == values.shape == (2 * 2 * 2 * 3, 4)
    # current-frame tokens first; the values of both frames match (same features)
    np.testing.assert_allclose(values.data[:12], values.data[12:])
    np.testing.assert_allclose(keys.data[:12] - values.data[:12],
                               np.moveaxis(pe_t.tensor.data, 1, -1).reshape(12, 4), atol=1e-12)
    k1, v1 = build_key_value(feats, None, pe_t, None, params)
    assert k1.shape == (12, 4)
    with pytest.raises(ValueError):
        build_key_value(feats, prev, pe_t, None, params)
    with pytest.raises(ValueError):
        build_key_value(feats, prev, pe_t, pe_t, params)  # frame tags disagree


def test_posembed_gradients():
    params, feats, coords = _setup(n_cams=1, c_in=2, c=3, h=1, w=2, d=2, seed=3)
    prev = FeatureMap(feats.tensor * 0.5, "t-1")
    coords_p = _coords((1, 1, 2, 2), 9)
    w = constant(np.random.default_rng(4).normal(size=(4, 3)))

    def f():
        k, v = build_key_value(feats, prev, feature_guided_pe(feats, coords, params),
                               feature_guided_pe(prev, coords_p, params), params)
        return (k * w).sum() + (v * v).sum()
    assert grad_check(f, [feats.tensor] + list(params.values())) < 1e-4


def test_sinusoidal_layout():
    pts = constant(np.array([[0.25, 0.5]]))
    out = sinusoidal(pts, 2).data[0]
    ang = np.array([0.25 * np.pi, 0.25 * 2 * np.pi, 0.5 * np.pi, 0.5 * 2 * np.pi])
    np.testing.assert_allclose(out, np.concatenate([np.sin(ang), np.cos(ang)]), atol=1e-12)


def test_seg_anchor_grid_centres():
    a = seg_anchor_grid(256, 32, 32)
    assert a.shape == (64, 2)
    np.testing.assert_allclose(a[0], [1 / 16, 1 / 16])
    np.testing.assert_allclose(a[9], [3 / 16, 3 / 16])
    with pytest.raises(ValueError):
        seg_anchor_grid(256, 30, 32)


def test_det_query_anchor_box():
    q = init_det_queries(16, 0, embed_dim=8, lo=(0.2, 0.3, 0.4), hi=(0.5, 0.6, 0.7))
    a = q.anchors.data
    assert np.all(a >= [0.2, 0.3, 0.4]) and np.all(a <= [0.5, 0.6, 0.7])
    with pytest.raises(ValueError):
        init_det_queries(4, 0, lo=(0, 0, 0), hi=(1.2, 1, 1))


def _decoder_inputs(seed=0, dim=8, n_tok=5, batch=2):
    rng = np.random.default_rng(seed)
    keys = parameter(rng.normal(size=(batch, n_tok, dim)))
    values = parameter(rng.normal(size=(batch, n_tok, dim)))
    return keys, values


def test_decoder_shapes_and_layers():
    det = init_det_queries(3, 0, embed_dim=8, num_freqs=2)
    seg = init_seg_queries(8, 4, 4, embed_dim=8, num_freqs=2)
    stack = init_decoder(2, 2, 8, seed=1)
    keys, values = _decoder_inputs()
    d, s = decode(det, seg, keys, values, stack, all_layers=True)
    assert len(d) == len(s) == 2
    assert d[-1].shape == (2, 3, 8) and s[-1].shape == (2, 4, 8)
    d1, _ = decode(det, None, Tensor(keys.data[0]), Tensor(values.data[0]), stack)
    assert d1.shape == (3, 8)


def test_decoder_is_permutation_invariant_in_tokens():
    det = init_det_queries(3, 0, embed_dim=8, num_freqs=2)
    stack = init_decoder(2, 2, 8, seed=1)
    keys, values = _decoder_inputs()
    perm = np.random.default_rng(3).permutation(5)
    a, _ = decode(det, None, keys, values, stack)
    b, _ = decode(det, None, Tensor(keys.data[:, perm]), Tensor(values.data[:, perm]), stack)
    np.testing.assert_allclose(a.data, b.data, atol=1e-10)


def test_attention_maps_recorded():
    det = init_det_queries(3, 0, embed_dim=8, num_freqs=2)
    stack = init_decoder(1, 2, 8, seed=1)
    stack.record = True
    keys, values = _decoder_inputs()
    decode(det, None, keys, values, stack)
    names = [n for n, _ in stack.attention_maps]
    assert names == ["decoder.0.self_attn", "decoder.0.cross_attn"]
    cross = stack.attention_maps[1][1]
    assert cross.shape == (2, 2, 3, 5)
    np.testing.assert_allclose(cross.sum(-1), 1.0)


def test_decoder_gradients():
    det = init_det_queries(2, 0, embed_dim=4, num_freqs=1)
    seg = init_seg_queries(4, 2, 2, embed_dim=4, num_freqs=1)
    stack = init_decoder(2, 2, 4, seed=2, ffn_mult=1)
    keys, values = _decoder_inputs(seed=5, dim=4, n_tok=3, batch=1)
    w = constant(np.random.default_rng(6).normal(size=(1, 6, 4)))

    def f():
        d, s = decode(det, seg, keys, values, stack)
        return (concat([d, s], axis=1) * w).sum()
    params = [keys, values] + list(det.all_params().values()) + list(seg.all_params().values()) + list(stack.params.values())
    assert grad_check(f, params, max_entries=6, eps=1e-4) < 1e-4

import copy

import numpy as np
import pytest

from hisunet import tensor as T
from hisunet.attention import (
    AttnPair,
    ChannelAttnParams,
    SpatialAttnParams,
    WamParams,
    cbam_apply,
    channel_attention,
    spatial_attention,
    wam_forward,
)
from hisunet.tensor import ShapeError, Tensor, grad_check

from .oracles import channel_attention_loops, spatial_attention_loops


def rng(seed=0):
    return np.random.default_rng(seed)


def live_pair(C, seed):
    pair = AttnPair.init(C, rng(seed))
    pair.channel.b1.data = np.abs(pair.channel.b1.data) + 0.5
    return pair


def test_channel_params_shapes():
    for C, hidden in ((32, 4), (8, 1), (4, 1), (256, 32)):
        p = ChannelAttnParams.init(C, rng())
        assert p.w1.shape == (hidden, C) and p.w2.shape == (C, hidden)
    assert SpatialAttnParams.init(rng()).kernel.shape == (1, 2, 7, 7)


def test_channel_attention_zero_weights_is_half():
    p = ChannelAttnParams.init(16, rng())
    for t in p.tensors().values():
        t.data = np.zeros_like(t.data)
    out = channel_attention(Tensor(rng(1).standard_normal((2, 16, 4, 4))), p).data
    assert out.shape == (2, 16, 1, 1)
    assert np.all(out == 0.5)


def test_channel_attention_matches_recomposition():
    x = rng(2).standard_normal((2, 16, 5, 4))
    p = live_pair(16, 3).channel
    out = channel_attention(Tensor(x), p).data
    assert np.all((out > 0) & (out < 1))
    np.testing.assert_allclose(out, channel_attention_loops(x, p), atol=1e-12, rtol=0)


def test_channel_attention_channel_mismatch():
    with pytest.raises(ShapeError):
        channel_attention(Tensor(np.zeros((1, 8, 2, 2))), ChannelAttnParams.init(16, rng()))


def test_spatial_attention():
    x = rng(4).standard_normal((2, 6, 8, 8))
    p = SpatialAttnParams.init(rng(5))
    out = spatial_attention(Tensor(x), p).data
    assert out.shape == (2, 1, 8, 8)
    assert np.all((out > 0) & (out < 1))
    np.testing.assert_allclose(out, spatial_attention_loops(x, p), atol=1e-12, rtol=0)
    p.kernel.data = np.zeros_like(p.kernel.data)
    assert np.all(spatial_attention(Tensor(x), p).data == 0.5)


def test_cbam_identity_zero_and_recomposition():
    x = rng(6).standard_normal((2, 8, 4, 4))
    pair = live_pair(8, 7)
    np.testing.assert_array_equal(cbam_apply(Tensor(x), pair, identity=True).data, x)
    assert not cbam_apply(Tensor(np.zeros_like(x)), pair).data.any()
    expected = x * channel_attention_loops(x, pair.channel) * spatial_attention_loops(x, pair.spatial)
    np.testing.assert_allclose(cbam_apply(Tensor(x), pair).data, expected, atol=1e-12, rtol=0)


def test_cbam_both_maps_from_same_input():
    # Ms must see x itself, not the channel-refined Mc * x
    x = rng(8).standard_normal((1, 8, 4, 4))
    pair = live_pair(8, 9)
    mc = channel_attention(Tensor(x), pair.channel).data
    ms_raw = spatial_attention(Tensor(x), pair.spatial).data
    np.testing.assert_array_equal(cbam_apply(Tensor(x), pair).data, x * mc * ms_raw)


def make_wam(C=8, H=4, W=4, seed=0, random_grids=True):
    p = WamParams.init(C, H, W, rng(seed))
    for pair in (p.attn_shared, p.attn_siv, p.attn_sic):
        pair.channel.b1.data = np.abs(pair.channel.b1.data) + 0.5
    if random_grids:
        r = rng(seed + 100)
        for g in p.grids().values():
            g.data = r.uniform(-1, 1, g.shape)
    return p


def test_wam_init():
    p = WamParams.init(16, 8, 6, rng())
    for g in p.grids().values():
        assert g.shape == (1, 16, 8, 6)
        assert np.all(g.data == 0.5)
    assert p.attn_shared is not p.attn_siv
    assert not np.array_equal(p.attn_shared.spatial.kernel.data, p.attn_siv.spatial.kernel.data)


def test_wam_pass_through():
    p = make_wam()
    p.identity = True
    p.a_in_siv.data[:] = 1.0
    p.a_in_sic.data[:] = 0.0
    p.a_out_siv.data[:] = 0.0
    xs, xi = rng(1).standard_normal((2, 8, 4, 4)), rng(2).standard_normal((2, 8, 4, 4))
    out_siv, _ = wam_forward(Tensor(xs), Tensor(xi), p)
    np.testing.assert_array_equal(out_siv.data, xs)


def test_wam_fresh_init_averages():
    p = WamParams.init(8, 4, 4, rng())
    p.identity = True
    p.a_out_siv.data[:] = 1.0  # out_siv = share + xi_siv exposes the shared map
    xs, xi = rng(1).standard_normal((2, 8, 4, 4)), rng(2).standard_normal((2, 8, 4, 4))
    out_siv, out_sic = wam_forward(Tensor(xs), Tensor(xi), p)
    share = (xs + xi) / 2
    assert np.max(np.abs((out_siv.data - xs) - share)) < 1e-12
    assert np.max(np.abs(out_sic.data - (0.5 * share + xi))) < 1e-12


def test_wam_matches_recomposition():
    p = make_wam(seed=3)
    xs, xi = rng(4).standard_normal((2, 8, 4, 4)), rng(5).standard_normal((2, 8, 4, 4))
    g = {k: v.data for k, v in p.grids().items()}

    def cb(x, pair):
        return x * channel_attention_loops(x, pair.channel) * spatial_attention_loops(x, pair.spatial)

    share = cb(g["a_in_siv"] * xs + g["a_in_sic"] * xi, p.attn_shared)
    exp_siv = g["a_out_siv"] * share + cb(xs, p.attn_siv)
    exp_sic = g["a_out_sic"] * share + cb(xi, p.attn_sic)
    out_siv, out_sic = wam_forward(Tensor(xs), Tensor(xi), p)
    np.testing.assert_allclose(out_siv.data, exp_siv, atol=1e-12, rtol=0)
    np.testing.assert_allclose(out_sic.data, exp_sic, atol=1e-12, rtol=0)


def test_wam_swap_symmetry():
    p = make_wam(seed=6)
    q = copy.copy(p)
    q.a_in_siv, q.a_in_sic = p.a_in_sic, p.a_in_siv
    q.a_out_siv, q.a_out_sic = p.a_out_sic, p.a_out_siv
    q.attn_siv, q.attn_sic = p.attn_sic, p.attn_siv
    xs, xi = rng(7).standard_normal((2, 8, 4, 4)), rng(8).standard_normal((2, 8, 4, 4))
    a_siv, a_sic = wam_forward(Tensor(xs), Tensor(xi), p)
    b_siv, b_sic = wam_forward(Tensor(xi), Tensor(xs), q)
    np.testing.assert_array_equal(a_siv.data, b_sic.data)
    np.testing.assert_array_equal(a_sic.data, b_siv.data)


def test_wam_linear_under_identity_attention():
    p = make_wam(seed=9)
    p.identity = True
    r = rng(10)
    x1, y1, x2, y2 = (r.standard_normal((1, 8, 4, 4)) for _ in range(4))
    a, b = 1.7, -0.6

    def f(u, v):
        return [t.data for t in wam_forward(Tensor(u), Tensor(v), p)]

    lhs = f(a * x1 + b * x2, a * y1 + b * y2)
    f1, f2 = f(x1, y1), f(x2, y2)
    for k in range(2):
        assert np.max(np.abs(lhs[k] - (a * f1[k] + b * f2[k]))) < 1e-10
        assert np.max(np.abs(f(a * x1, a * y1)[k] - a * f1[k])) < 1e-10


def test_wam_gradients_reach_all_grids():
    p = make_wam(C=8, H=2, W=2, seed=11)
    xs, xi = rng(12).standard_normal((1, 8, 2, 2)), rng(13).standard_normal((1, 8, 2, 2))
    w = rng(14).standard_normal((1, 8, 2, 2))
    for name in p.grids():
        def f(t, n=name):
            q = copy.copy(p)
            setattr(q, n, t)
            o1, o2 = wam_forward(Tensor(xs), Tensor(xi), q)
            return T.total(T.ew(T.ew(o1, o2, "add"), Tensor(w), "mul"))

        assert grad_check(f, getattr(p, name).data) < 1e-4


def test_wam_shape_checks():
    p = WamParams.init(8, 4, 4, rng())
    with pytest.raises(ShapeError):
        wam_forward(Tensor(np.zeros((1, 8, 4, 4))), Tensor(np.zeros((1, 8, 2, 2))), p)
    with pytest.raises(ShapeError):
        wam_forward(Tensor(np.zeros((1, 8, 2, 2))), Tensor(np.zeros((1, 8, 2, 2))), p)


def test_attention_maps_in_unit_interval_for_large_inputs():
    pair = live_pair(8, 15)
    x = Tensor(rng(16).standard_normal((1, 8, 4, 4)) * 1e4)
    for m in (channel_attention(x, pair.channel).data, spatial_attention(x, pair.spatial).data):
        assert np.isfinite(m).all() and np.all((m >= 0) & (m <= 1))

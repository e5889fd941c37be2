import numpy as np
import pytest

from hisunet.models import (
    CheckpointError,
    Model,
    ModelSpec,
    NEURAL_KINDS,
    deserialize,
    load_checkpoint,
    predict_stack,
    save_checkpoint,
    serialize,
)
from hisunet.tensor import ShapeError, Tensor, no_grad
from hisunet.training import masked_loss


def small(kind, H=16, W=16, stem=4, seed=0, depth=3):
    return Model(ModelSpec(kind=kind, stem_channels=stem, depth=depth, height=H, width=W, seed=seed))


def x_in(B=2, H=16, W=16, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(-1, 1, (B, 20, H, W)))


def run(model, x):
    with no_grad():
        return [t.data for t in model(x)]


@pytest.mark.parametrize("kind", NEURAL_KINDS)
def test_output_shapes_and_range(kind):
    H, W = (32, 64) if kind == "cnn_dense" else (16, 24)
    m = small(kind, H, W)
    outs = run(m, x_in(2, H, W))
    assert len(outs) == 3
    for o in outs:
        assert o.shape == (2, 1, H, W)
        assert np.all(np.abs(o) < 1)


@pytest.mark.parametrize("kind", ["his_unet", "eb_unet", "lb_unet", "unet", "fcn7"])
def test_zero_heads_give_zero_output(kind):
    m = small(kind)
    for name, t in m.params.items():
        if "head" in name:
            t.data = np.zeros_like(t.data)
    for o in run(m, Tensor(np.zeros((1, 20, 16, 16)))):
        assert not o.any()
    for o in run(m, x_in(1)):
        assert not o.any()


def conv_count(cin, cout, k=3):
    return cout * cin * k * k + cout


def up_count(cin, cout):
    return cin * cout * 4 + cout


def wam_count(C, h, w):
    hid = max(1, C // 8)
    pair = (hid * C + hid + C * hid + C) + 2 * 49
    return 4 * C * h * w + 3 * pair


def test_his_unet_parameter_count_audit():
    # default ladder 32 -> 64 -> 128 -> 256, written out by hand
    H = W = 64
    branch = (
        conv_count(32, 32)
        + conv_count(32, 64) + conv_count(64, 64)
        + conv_count(64, 128) + conv_count(128, 128)
        + conv_count(128, 256) + conv_count(256, 256)
        + up_count(256, 128) + conv_count(256, 128) + conv_count(128, 128)
        + up_count(128, 64) + conv_count(128, 64) + conv_count(64, 64)
        + up_count(64, 32) + conv_count(64, 32) + conv_count(32, 32)
    )
    heads = conv_count(32, 2, 1) + conv_count(32, 1, 1)
    wams = (wam_count(32, 32, 32) + wam_count(64, 16, 16) + wam_count(128, 8, 8)
            + wam_count(128, 16, 16) + wam_count(64, 32, 32) + wam_count(32, 64, 64))
    eb_total = conv_count(20, 32) + 2 * branch + heads
    his = Model(ModelSpec(height=H, width=W))
    eb = Model(ModelSpec(kind="eb_unet", height=H, width=W))
    assert eb.n_parameters() == eb_total
    assert his.n_parameters() == eb_total + wams
    assert len(his.wams) == 6
    for br in ("siv", "sic"):
        ladder = [his.params[f"{br}.enc{l}.conv2.w"].shape[0] for l in (1, 2, 3)]
        assert ladder + [his.params[f"{br}.mid.conv2.w"].shape[0]] == [32, 64, 128, 256]
    assert [w.grid_shape for w in his.wams] == [
        (1, 32, 32, 32), (1, 64, 16, 16), (1, 128, 8, 8), (1, 128, 16, 16), (1, 64, 32, 32), (1, 32, 64, 64)
    ]


def test_unet_and_lb_unet_parameter_counts():
    enc = (conv_count(20, 32) + conv_count(32, 32) + conv_count(32, 64) + conv_count(64, 64)
           + conv_count(64, 128) + conv_count(128, 128) + conv_count(128, 256) + conv_count(256, 256))
    dec_no_last = (up_count(256, 128) + conv_count(256, 128) + conv_count(128, 128)
                   + up_count(128, 64) + conv_count(128, 64) + conv_count(64, 64)
                   + up_count(64, 32) + conv_count(64, 32))
    unet = Model(ModelSpec(kind="unet", height=16, width=16))
    assert unet.n_parameters() == enc + dec_no_last + conv_count(32, 32) + conv_count(32, 3, 1)
    lb = Model(ModelSpec(kind="lb_unet", height=16, width=16))
    assert lb.n_parameters() == enc + dec_no_last + 2 * conv_count(32, 32) + conv_count(32, 2, 1) + conv_count(32, 1, 1)


def test_his_unet_degenerates_to_eb_unet():
    his = small("his_unet", seed=3)
    his.identity_attention = True
    for w in his.wams:
        w.a_out_siv.data[:] = 0.0
        w.a_out_sic.data[:] = 0.0
    eb = small("eb_unet", seed=99)
    eb.load_arrays({k: v for k, v in his.state_arrays().items() if not k.startswith("wam")})
    x = x_in(2, seed=4)
    for a, b in zip(run(his, x), run(eb, x)):
        assert np.max(np.abs(a - b)) < 1e-10


def test_his_unet_branches_interact_only_through_wams():
    # perturbing a SIC-branch weight must leave the SIV outputs untouched once the WAMs are cut
    his = small("his_unet", seed=5)
    his.identity_attention = True
    for w in his.wams:
        w.a_out_siv.data[:] = 0.0
    x = x_in(1, seed=6)
    u0, v0, a0 = run(his, x)
    his.params["sic.enc2.conv1.w"].data = his.params["sic.enc2.conv1.w"].data + 0.3
    u1, v1, a1 = run(his, x)
    np.testing.assert_array_equal(u0, u1)
    np.testing.assert_array_equal(v0, v1)
    assert np.abs(a0 - a1).max() > 0


def test_fcn7_receptive_field_is_17():
    m = small("fcn7", H=40, W=40)
    base = np.random.default_rng(1).uniform(-1, 1, (1, 20, 40, 40))
    bumped = base.copy()
    bumped[0, :, 20, 20] += 0.5
    d = np.abs(predict_stack_np(m, bumped) - predict_stack_np(m, base)).max(axis=(0, 1))
    rows, cols = np.nonzero(d > 0)
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (12, 28, 12, 28)
    assert rows.max() - rows.min() + 1 == 17


def predict_stack_np(m, x):
    with no_grad():
        return predict_stack(m, Tensor(x)).data


def test_fcn7_accepts_any_size():
    m = small("fcn7", H=7, W=9)
    assert run(m, x_in(1, 7, 9))[0].shape == (1, 1, 7, 9)


def test_cnn_dense_dense_dimension():
    for H, W, stem in ((32, 64, 4), (64, 64, 2)):
        m = small("cnn_dense", H, W, stem=stem)
        c5 = m.cnn_dense_widths()[-1]
        assert m.params["dense.w"].shape == (3 * H * W, (H // 32) * (W // 32) * c5)


def test_cnn_dense_zero_dense_gives_constant_bias():
    m = small("cnn_dense", 32, 32)
    m.params["dense.w"].data[:] = 0.0
    b = m.params["dense.b"].data
    u, v, a = run(m, x_in(2, 32, 32))
    np.testing.assert_array_equal(u[0, 0], np.tanh(b[: 32 * 32].reshape(32, 32)))
    np.testing.assert_array_equal(u[0], u[1])


def test_spatial_size_violations():
    with pytest.raises(ShapeError):
        Model(ModelSpec(kind="his_unet", height=20, width=16))
    with pytest.raises(ShapeError):
        Model(ModelSpec(kind="cnn_dense", height=48, width=64))
    m = small("unet")
    with pytest.raises(ShapeError):
        m(x_in(1, 12, 16))
    with pytest.raises(ShapeError):
        m(Tensor(np.zeros((1, 19, 16, 16))))


def test_forward_deterministic_and_seeded():
    a, b, c = small("his_unet", seed=1), small("his_unet", seed=1), small("his_unet", seed=2)
    x = x_in(1)
    for p, q in zip(run(a, x), run(b, x)):
        np.testing.assert_array_equal(p, q)
    assert any(not np.array_equal(p, q) for p, q in zip(run(a, x), run(c, x)))


def test_init_bounds():
    m = small("unet")
    w = m.params["enc2.conv1.w"].data
    bound = np.sqrt(1.0 / (4 * 9))
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.5 * bound


@pytest.mark.parametrize("kind", NEURAL_KINDS)
def test_serialization_round_trip_bitwise(kind, tmp_path):
    H, W = (32, 32) if kind == "cnn_dense" else (16, 16)
    m = small(kind, H, W, seed=7)
    x = x_in(1, H, W)
    blob = serialize(m.spec, m.state_arrays(), {"note": "x"})
    spec, arrays, meta = deserialize(blob)
    assert spec == m.spec and meta == {"note": "x"}
    assert serialize(spec, arrays, meta) == blob
    path = tmp_path / "m.hsun"
    save_checkpoint(path, m)
    m2 = load_checkpoint(path)[0]
    for p, q in zip(run(m, x), run(m2, x)):
        np.testing.assert_array_equal(p, q)


def test_checkpoint_corruption_rejected():
    m = small("unet")
    blob = serialize(m.spec, m.state_arrays())
    with pytest.raises(CheckpointError, match="magic"):
        deserialize(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="truncated"):
        deserialize(blob[:-3])
    with pytest.raises(CheckpointError, match="version"):
        deserialize(blob[:4] + (2).to_bytes(4, "little") + blob[8:])


def test_gradients_reach_every_parameter():
    m = small("his_unet", seed=8)
    # a one-unit attention MLP may start with its relu inactive; keep it live so every weight is exercised
    for name, t in m.params.items():
        if name.endswith(".ca.b1"):
            t.data = np.abs(t.data) + 0.5
    x = x_in(1)
    y = np.random.default_rng(9).uniform(-1, 1, (1, 3, 16, 16))
    masked_loss(predict_stack(m, x), y, np.ones((1, 1, 16, 16))).backward()
    missing = [k for k, t in m.params.items() if t.grad is None or not np.any(t.grad)]
    assert missing == []

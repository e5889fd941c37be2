import struct
from datetime import date

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hisunet.data import (
    ALL_VARS,
    LAST_DAY_TARGET_CHANNELS,
    N_INPUT,
    NormSpec,
    bilinear_reproject,
    build_samples,
    coast_mask,
    denormalize,
    input_channel_names,
    normalize,
    pad_samples,
    split_dataset,
    stack_batch,
)
from hisunet.sigd import GridStack, SigdError, VarGrid, decode, encode, read_stack, write_stack

from .oracles import coast_mask_brute


def random_stack(n_days=6, H=8, W=8, seed=0, land=None):
    r = np.random.default_rng(seed)
    data = np.zeros((n_days, len(ALL_VARS), H, W), dtype=np.float32)
    scales = {"siv_u": 20, "siv_v": 20, "sic": 1, "t2m": 10, "wind_u": 10, "wind_v": 10}
    for i, v in enumerate(ALL_VARS):
        if v in scales:
            data[:, i] = r.uniform(-1, 1, (n_days, H, W)) * scales[v]
    data[:, ALL_VARS.index("sic")] = np.abs(data[:, ALL_VARS.index("sic")])
    yy, xx = np.mgrid[0:H, 0:W]
    data[:, ALL_VARS.index("coord_x")] = xx * 25.0
    data[:, ALL_VARS.index("coord_y")] = yy * 25.0
    if land is not None:
        data[:, ALL_VARS.index("land")] = land
    return GridStack(list(ALL_VARS), date(2020, 1, 30), data)


# SIGD --------------------------------------------------------------------------


def test_sigd_round_trip_bitwise(tmp_path):
    s = random_stack()
    s.data[2, 3, 1, 1] = np.nan
    path = tmp_path / "a.sigd"
    write_stack(path, s)
    t = read_stack(path)
    assert t.variables == s.variables and t.start == s.start
    assert t.data.tobytes() == s.data.tobytes()
    assert encode(t) == path.read_bytes()


def test_sigd_golden_bytes():
    # reference bytes assembled by hand from the documented layout
    data = np.array([[[[1.0, -2.5]], [[np.nan, 0.25]]]], dtype=np.float32)  # 1 day, 2 vars, 1x2
    golden = (
        b"SIGD1"
        + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        + (2).to_bytes(4, "little") + (1).to_bytes(4, "little")
        + (3).to_bytes(4, "little") + b"sic"
        + (3).to_bytes(4, "little") + b"t2m"
        + (10).to_bytes(4, "little") + b"2021-03-04"
        + struct.pack("<f", 1.0) + struct.pack("<f", -2.5)
        + bytes.fromhex("0000c07f") + struct.pack("<f", 0.25)
    )
    stack = GridStack(["sic", "t2m"], date(2021, 3, 4), data)
    assert encode(stack) == golden
    back = decode(golden)
    assert back.variables == ["sic", "t2m"] and back.start == date(2021, 3, 4)
    assert back.data.tobytes() == data.tobytes()
    assert back.grid(0, "sic").mask.tolist() == [[True, True]]
    assert back.grid(0, "t2m").mask.tolist() == [[False, True]]


def test_sigd_errors():
    blob = encode(random_stack(2, 2, 2))
    with pytest.raises(SigdError, match="magic"):
        decode(b"NOPE" + blob[4:])
    with pytest.raises(SigdError, match="version"):
        decode(b"SIGD2" + blob[5:])
    with pytest.raises(SigdError, match="truncated"):
        decode(blob[:-1])
    with pytest.raises(SigdError, match="truncated"):
        decode(blob[:12])


def test_vargrid_round_trip():
    s = random_stack(3, 4, 5)
    s.data[1, 2, 0, 0] = np.nan
    back = GridStack.from_vargrids(s.to_vargrids())
    assert back.data.tobytes() == s.data.tobytes()
    assert isinstance(s.grid(0, "sic"), VarGrid)


# normalization ---------------------------------------------------------------------


def test_normalize_examples():
    n = NormSpec()
    assert normalize(np.array(-50.0), "siv_u", n) == -1.0
    assert normalize(np.array(0.5), "sic", n) == 0.0
    assert normalize(np.array(-10.0), "t2m", n) == 0.0
    assert normalize(np.array(99.0), "wind_v", n) == 1.0  # clamped
    with pytest.raises(KeyError):
        normalize(np.array(1.0), "salinity", n)
    with pytest.raises(ValueError):
        NormSpec({"sic": (1.0, 0.0)})


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(["siv_u", "sic", "t2m", "wind_u"]), st.integers(0, 2**31))
def test_normalize_round_trip(var, seed):
    lo, hi = NormSpec().limits(var)
    x = np.random.default_rng(seed).uniform(lo, hi, 50)
    n = NormSpec()
    assert np.max(np.abs(denormalize(normalize(x, var, n), var, n) - x)) < 1e-12


def test_coordinate_bounds_resolve_to_extent():
    s = random_stack(4, 6, 8)
    n = NormSpec().resolved(s)
    assert n.limits("coord_x") == (0.0, 175.0)
    assert n.limits("coord_y") == (0.0, 125.0)
    with pytest.raises(KeyError):
        NormSpec().limits("coord_x")


# reprojection --------------------------------------------------------------------------


def test_bilinear_identity_and_constant():
    r = np.random.default_rng(1)
    src = r.standard_normal((5, 6))
    xs, ys = np.arange(6.0), np.arange(5.0) * 2
    X, Y = np.meshgrid(xs, ys)
    vals, ok = bilinear_reproject(src, xs, ys, X, Y)
    assert ok.all()
    np.testing.assert_allclose(vals, src, atol=1e-15, rtol=0)
    vals, ok = bilinear_reproject(np.full((5, 6), 3.25), xs, ys, r.uniform(0, 5, 20), r.uniform(0, 8, 20))
    assert ok.all() and np.allclose(vals, 3.25, atol=1e-15)


def test_bilinear_reproduces_planes():
    xs, ys = np.linspace(-3, 7, 11), np.linspace(10, 40, 7)
    X, Y = np.meshgrid(xs, ys)
    src = 1.7 * X - 0.4 * Y + 2.0
    r = np.random.default_rng(2)
    qx, qy = r.uniform(-3, 7, 200), r.uniform(10, 40, 200)
    vals, ok = bilinear_reproject(src, xs, ys, qx, qy)
    assert ok.all()
    assert np.max(np.abs(vals - (1.7 * qx - 0.4 * qy + 2.0))) < 1e-10


def test_bilinear_outside_and_masked_points_invalid():
    xs, ys = np.arange(4.0), np.arange(4.0)
    src = np.ones((4, 4))
    mask = np.ones((4, 4), bool)
    mask[1, 1] = False
    vals, ok = bilinear_reproject(src, xs, ys, np.array([-0.5, 0.5, 2.5, 3.0]), np.array([1.0, 0.5, 2.5, 3.0]), mask)
    assert ok.tolist() == [False, False, True, True]
    assert np.isnan(vals[0]) and np.isnan(vals[1])


def test_bilinear_within_node_range():
    r = np.random.default_rng(3)
    src = r.standard_normal((6, 6))
    xs = ys = np.arange(6.0)
    qx, qy = r.uniform(0, 5, 300), r.uniform(0, 5, 300)
    vals, _ = bilinear_reproject(src, xs, ys, qx, qy)
    ix, iy = np.minimum(qx.astype(int), 4), np.minimum(qy.astype(int), 4)
    nodes = np.stack([src[iy, ix], src[iy, ix + 1], src[iy + 1, ix], src[iy + 1, ix + 1]])
    assert np.all(vals >= nodes.min(axis=0) - 1e-12) and np.all(vals <= nodes.max(axis=0) + 1e-12)


# coast mask -----------------------------------------------------------------------------


def test_coast_mask_examples():
    assert coast_mask(np.zeros((6, 6))).all()
    land = np.zeros((9, 9))
    land[4, 4] = 1
    m = coast_mask(land, 2)
    assert (~m).sum() == 25 and not m[2:7, 2:7].any()


def test_coast_mask_matches_brute_force():
    r = np.random.default_rng(4)
    for i in range(50):
        H, W = r.integers(3, 14, 2)
        land = r.random((H, W)) < r.uniform(0.01, 0.2)
        b = int(r.integers(0, 4))
        np.testing.assert_array_equal(coast_mask(land, b), coast_mask_brute(land, b), err_msg=f"mask {i}")


def test_coast_mask_monotone():
    r = np.random.default_rng(5)
    land = r.random((12, 12)) < 0.05
    more = land | (r.random((12, 12)) < 0.05)
    assert not (coast_mask(more) & ~coast_mask(land)).any()


# samples ---------------------------------------------------------------------------------


def test_channel_layout():
    names = input_channel_names()
    assert len(names) == N_INPUT == 20
    assert names[:6] == ["siv_u@t-3", "siv_v@t-3", "sic@t-3", "t2m@t-3", "wind_u@t-3", "wind_v@t-3"]
    assert names[18:] == ["coord_x", "coord_y"]
    assert [names[i] for i in LAST_DAY_TARGET_CHANNELS] == ["siv_u@t-1", "siv_v@t-1", "sic@t-1"]


def test_build_samples_counts():
    assert len(build_samples(random_stack(4), NormSpec())) == 1
    assert len(build_samples(random_stack(11), NormSpec())) == 8


def test_build_samples_content():
    s = random_stack(5, seed=6)
    n = NormSpec().resolved(s)
    samples = build_samples(s, n, buffer_px=0)
    assert [x.date for x in samples] == [date(2020, 2, 2), date(2020, 2, 3)]
    x = samples[1]
    assert x.input.shape == (1, 20, 8, 8) and x.target.shape == (1, 3, 8, 8)
    assert np.all(np.abs(x.input) <= 1)
    # day t-2 t2m is channel 9; sample 1 targets day 4
    np.testing.assert_allclose(x.input[0, 9], normalize(s.var("t2m")[2], "t2m", n))
    np.testing.assert_allclose(x.target[0, 2], normalize(s.var("sic")[4], "sic", n))
    np.testing.assert_allclose(x.input[0, 18], normalize(s.var("coord_x")[0], "coord_x", n))
    assert x.mask.all()


def test_build_samples_drops_windows_with_missing_day():
    n_days, k = 12, 6
    s = random_stack(n_days, seed=7)
    s.data[k, :8] = np.nan  # every dynamic grid of day k missing
    dates = [x.date for x in build_samples(s, NormSpec())]
    # windows are (t-3 .. t); day k sits in the windows with t in k..k+3
    expected = [s.dates[t] for t in range(3, n_days) if not (k <= t <= k + 3)]
    assert dates == expected


def test_missing_forcing_only_drops_windows_using_it_as_input():
    n_days, k = 12, 6
    s = random_stack(n_days, seed=7)
    s.data[k, ALL_VARS.index("wind_u")] = np.nan
    dates = [x.date for x in build_samples(s, NormSpec())]
    assert dates == [s.dates[t] for t in range(3, n_days) if not (k + 1 <= t <= k + 3)]


def test_build_samples_partial_nan_shrinks_mask():
    land = np.zeros((8, 8))
    land[0, 0] = 1
    s = random_stack(6, land=land, seed=8)
    s.data[2, ALL_VARS.index("sic"), 5, 5] = np.nan
    samples = build_samples(s, NormSpec(), buffer_px=1)
    assert len(samples) == 3
    for x in samples:
        assert not x.mask[:2, :2].any()
        assert np.isfinite(x.input).all()
    # day 2 feeds targets on days 3, 4, 5
    assert [bool(x.mask[5, 5]) for x in samples] == [False, False, False]
    s.data[1, ALL_VARS.index("sic"), 5, 5] = np.nan
    s.data[2, ALL_VARS.index("sic"), 5, 5] = 0.5
    assert [bool(x.mask[5, 5]) for x in build_samples(s, NormSpec(), buffer_px=1)] == [False, False, True]


def test_split_dataset():
    items = list(range(10))
    tr, va = split_dataset(items, 0.8, seed=3)
    assert len(tr) == 8 and len(va) == 2
    assert sorted(tr + va) == items
    assert tr == sorted(tr) and va == sorted(va)
    assert split_dataset(items, 0.8, seed=3) == (tr, va)
    assert split_dataset(items, 0.8, seed=4) != (tr, va)


def test_stack_and_pad():
    samples = build_samples(random_stack(6, 8, 8), NormSpec())
    x, y, m = stack_batch(samples, np.float32)
    assert x.shape == (3, 20, 8, 8) and y.shape == (3, 3, 8, 8) and m.shape == (3, 1, 8, 8)
    assert x.dtype == np.float32
    padded = pad_samples(samples, 32)
    assert padded[0].input.shape == (1, 20, 32, 32)
    assert padded[0].mask[:8, :8].sum() == samples[0].mask.sum() and padded[0].mask.sum() == samples[0].mask.sum()

"""Normalization, masking, reprojection and sample assembly.

Input channel layout of a :class:`Sample` (20 channels)::

    day t-3: siv_u siv_v sic t2m wind_u wind_v   (channels 0-5)
    day t-2: ...                                 (channels 6-11)
    day t-1: ...                                 (channels 12-17)
    coord_x coord_y                              (channels 18-19)

Targets are ``siv_u, siv_v, sic`` on day ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from datetime import date

import numpy as np
from scipy import ndimage

from .sigd import GridStack

DAY_VARS = ("siv_u", "siv_v", "sic", "t2m", "wind_u", "wind_v")
STATIC_VARS = ("coord_x", "coord_y")
TARGET_VARS = ("siv_u", "siv_v", "sic")
ALL_VARS = DAY_VARS + STATIC_VARS + ("land",)
HISTORY_DAYS = 3
N_INPUT = HISTORY_DAYS * len(DAY_VARS) + len(STATIC_VARS)
# channels of day t-1 u, v, A inside the input stack
LAST_DAY_TARGET_CHANNELS = tuple((HISTORY_DAYS - 1) * len(DAY_VARS) + DAY_VARS.index(v) for v in TARGET_VARS)

_GROUP = {"siv_u": "siv", "siv_v": "siv", "wind_u": "wind", "wind_v": "wind"}


def input_channel_names() -> list[str]:
    names = [f"{v}@t-{HISTORY_DAYS - d}" for d in range(HISTORY_DAYS) for v in DAY_VARS]
    return names + list(STATIC_VARS)


@dataclass
class NormSpec:
    """Nominal ``(min, max)`` per variable group.

    ``None`` coordinate bounds are filled from the grid extent by
    :meth:`resolved`.
    """

    bounds: dict[str, tuple[float, float] | None] = field(
        default_factory=lambda: {
            "siv": (-50.0, 50.0),
            "sic": (0.0, 1.0),
            "t2m": (-50.0, 30.0),
            "wind": (-40.0, 40.0),
            "coord_x": None,
            "coord_y": None,
        }
    )

    def __post_init__(self):
        for k, b in self.bounds.items():
            if b is not None and not b[0] < b[1]:
                raise ValueError(f"normalization bounds for {k!r} need min < max, got {b}")

    def limits(self, var: str) -> tuple[float, float]:
        key = _GROUP.get(var, var)
        if key not in self.bounds:
            raise KeyError(f"no normalization bounds for variable {var!r}")
        b = self.bounds[key]
        if b is None:
            raise KeyError(f"bounds for {key!r} are unresolved; call NormSpec.resolved(stack)")
        return b

    def resolved(self, stack: GridStack) -> "NormSpec":
        bounds = dict(self.bounds)
        for key in STATIC_VARS:
            if bounds.get(key) is None:
                vals = stack.var(key)
                lo, hi = float(np.nanmin(vals)), float(np.nanmax(vals))
                if not hi > lo:
                    lo, hi = lo - 1.0, hi + 1.0
                bounds[key] = (lo, hi)
        return replace(self, bounds=bounds)


def normalize(values: np.ndarray, var: str, norm: NormSpec) -> np.ndarray:
    """Affine map of ``[min, max]`` onto ``[-1, 1]``, clamped."""
    lo, hi = norm.limits(var)
    out = 2.0 * (np.asarray(values, dtype=np.float64) - lo) / (hi - lo) - 1.0
    return np.clip(out, -1.0, 1.0)


def denormalize(values: np.ndarray, var: str, norm: NormSpec) -> np.ndarray:
    lo, hi = norm.limits(var)
    return (np.asarray(values, dtype=np.float64) + 1.0) * (hi - lo) / 2.0 + lo


# --------------------------------------------------------------------------


def _locate(axis: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    idx = np.clip(np.searchsorted(axis, q, side="right") - 1, 0, len(axis) - 2)
    t = (q - axis[idx]) / (axis[idx + 1] - axis[idx])
    inside = (q >= axis[0]) & (q <= axis[-1])
    return idx, t, inside


def bilinear_reproject(
    src: np.ndarray,
    src_x: np.ndarray,
    src_y: np.ndarray,
    dst_x: np.ndarray,
    dst_y: np.ndarray,
    src_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample a gridded field at arbitrary points.

    ``src`` is ``(len(src_y), len(src_x))``; axes must be strictly monotonic.
    Returns ``(values, valid)`` shaped like ``dst_x``. A point is invalid when
    it lies outside the source extent or any node with non-zero weight is
    invalid (masked or NaN); invalid values are NaN.
    """
    src = np.asarray(src, dtype=np.float64)
    src_x = np.asarray(src_x, dtype=np.float64)
    src_y = np.asarray(src_y, dtype=np.float64)
    if src_x[0] > src_x[-1]:
        src_x, src = src_x[::-1], src[:, ::-1]
        src_mask = None if src_mask is None else src_mask[:, ::-1]
    if src_y[0] > src_y[-1]:
        src_y, src = src_y[::-1], src[::-1, :]
        src_mask = None if src_mask is None else src_mask[::-1, :]
    good = np.isfinite(src) if src_mask is None else (np.asarray(src_mask, bool) & np.isfinite(src))
    filled = np.where(good, src, 0.0)

    dst_x = np.asarray(dst_x, dtype=np.float64)
    dst_y = np.asarray(dst_y, dtype=np.float64)
    ix, tx, in_x = _locate(src_x, dst_x)
    iy, ty, in_y = _locate(src_y, dst_y)

    corners = (
        (iy, ix, (1 - ty) * (1 - tx)),
        (iy, ix + 1, (1 - ty) * tx),
        (iy + 1, ix, ty * (1 - tx)),
        (iy + 1, ix + 1, ty * tx),
    )
    values = np.zeros(dst_x.shape)
    valid = in_x & in_y
    for r, c, w in corners:
        values += w * filled[r, c]
        valid &= good[r, c] | (w == 0)
    return np.where(valid, values, np.nan), valid


def coast_mask(land: np.ndarray, buffer_px: int = 2) -> np.ndarray:
    """True where ocean and more than ``buffer_px`` cells (Chebyshev) from land."""
    land = np.asarray(land) > 0.5
    if buffer_px <= 0:
        return ~land
    near = ndimage.maximum_filter(land.astype(np.uint8), size=2 * buffer_px + 1, mode="constant", cval=0)
    return near == 0


# --------------------------------------------------------------------------


@dataclass
class Sample:
    input: np.ndarray  # (1, 20, H, W), values in [-1, 1]
    target: np.ndarray  # (1, 3, H, W) normalized u, v, A on the target day
    mask: np.ndarray  # (H, W) bool
    date: date


def _static_field(stack: GridStack, var: str) -> np.ndarray:
    vals = stack.var(var)
    for d in range(stack.n_days):
        if np.isfinite(vals[d]).any():
            return vals[d].astype(np.float64)
    raise ValueError(f"variable {var!r} has no valid data on any day")


def build_samples(stack: GridStack, norm: NormSpec, buffer_px: int = 2) -> list[Sample]:
    """One sample per complete 4-day window, ordered by target date.

    A window is dropped when any required variable is entirely missing on one
    of its days; partially missing grids only shrink the pixel mask.
    """
    norm = norm.resolved(stack)
    H, W = stack.shape
    land = _static_field(stack, "land")
    base_mask = coast_mask(np.nan_to_num(land, nan=1.0), buffer_px)
    statics = []
    for v in STATIC_VARS:
        raw = _static_field(stack, v)
        base_mask &= np.isfinite(raw)
        statics.append(np.nan_to_num(normalize(raw, v, norm)))

    day_idx = [stack.index(v) for v in DAY_VARS]
    tgt_idx = [stack.index(v) for v in TARGET_VARS]
    present = np.isfinite(stack.data).any(axis=(2, 3))  # (n_days, n_vars)
    dates = stack.dates

    samples = []
    for t in range(HISTORY_DAYS, stack.n_days):
        hist = range(t - HISTORY_DAYS, t)
        if not all(present[d, i] for d in hist for i in day_idx):
            continue
        if not all(present[t, i] for i in tgt_idx):
            continue
        mask = base_mask.copy()
        chans = []
        for d in hist:
            for v, i in zip(DAY_VARS, day_idx):
                raw = stack.data[d, i]
                mask &= np.isfinite(raw)
                chans.append(normalize(raw, v, norm))
        target = []
        for v, i in zip(TARGET_VARS, tgt_idx):
            raw = stack.data[t, i]
            mask &= np.isfinite(raw)
            target.append(normalize(raw, v, norm))
        x = np.nan_to_num(np.stack(chans + statics))[None]
        y = np.nan_to_num(np.stack(target))[None]
        samples.append(Sample(x, y, mask, dates[t]))
    return samples


def split_dataset(samples: list, ratio: float = 0.8, seed: int = 0) -> tuple[list, list]:
    """Random train/validation split; both parts keep the input order."""
    n = len(samples)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratio * n))
    train_idx = np.sort(perm[:n_train])
    val_idx = np.sort(perm[n_train:])
    return [samples[i] for i in train_idx], [samples[i] for i in val_idx]


def stack_batch(samples: list[Sample], dtype=np.float64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.concatenate([s.input for s in samples]).astype(dtype)
    y = np.concatenate([s.target for s in samples]).astype(dtype)
    m = np.stack([s.mask for s in samples])[:, None].astype(dtype)
    return x, y, m


def pad_samples(samples: list[Sample], multiple: int) -> list[Sample]:
    """Zero-pad samples (mask False in the pad) up to a multiple of ``multiple`` pixels."""
    out = []
    for s in samples:
        H, W = s.mask.shape
        ph, pw = (-H) % multiple, (-W) % multiple
        pad4 = ((0, 0), (0, 0), (0, ph), (0, pw))
        out.append(Sample(np.pad(s.input, pad4), np.pad(s.target, pad4), np.pad(s.mask, ((0, ph), (0, pw))), s.date))
    return out

"""Coupled synthetic SIC/SIV world.

Ice drifts freely with the wind (turned and scaled, plus a constant
background current) and concentration evolves by semi-Lagrangian transport
of ``dA/dt + div(u A) = f_c`` with a linear freeze/melt term. Ridging is
ignored. Grid spacing is ``dx_km``; the time step is one day.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from datetime import date, timedelta
from typing import Iterator

import numpy as np
from scipy import ndimage

from .data import ALL_VARS, bilinear_reproject
from .sigd import GridStack

MS_TO_KM_DAY = 86.4
T_FREEZE = 0.0


class CFLError(ValueError):
    """Ice moved more than one cell in a step."""


@dataclass(frozen=True)
class WorldConfig:
    height: int = 48
    width: int = 48
    n_days: int = 250
    seed: int = 0
    alpha: float = 0.02  # drift speed / wind speed
    theta: float = 20.0  # turning angle, degrees clockwise of the wind
    k_f: float = 0.004  # freeze/melt rate, fraction / day / degree
    rho: float = 0.75  # AR(1) day-to-day persistence of wind and temperature anomalies (~3.5 day decorrelation)
    wind_std: float = 5.0  # m/s
    wind_max: float = 12.0  # m/s speed cap
    wind_smoothness: float = 5.0  # Gaussian filter sigma, cells
    land: str = "island"  # none | island | edge
    temp_mean: float = -2.0
    temp_amplitude: float = 6.0  # seasonal
    temp_gradient: float = 8.0  # cold centre, warm rim
    temp_noise: float = 2.0
    current_u: float = 3.0  # km/day
    current_v: float = -2.0
    dx_km: float = 25.0
    boundary: str = "periodic"  # periodic | closed
    start_date: str = "2021-01-01"

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must satisfy 0 <= alpha < 1, got {self.alpha}")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must satisfy 0 <= rho < 1, got {self.rho}")
        if self.land not in ("none", "island", "edge"):
            raise ValueError(f"unknown land geometry {self.land!r}")
        if self.boundary not in ("periodic", "closed"):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if self.height < 4 or self.width < 4 or self.n_days < 1:
            raise ValueError("world must be at least 4x4 and 1 day")

    @classmethod
    def keys(cls) -> dict[str, type]:
        types = {"int": int, "float": float, "str": str}
        return {f.name: types[f.type] for f in fields(cls)}


def _streams(cfg: WorldConfig) -> dict[str, np.random.Generator]:
    ss = np.random.SeedSequence(cfg.seed)
    wind, temp, ice = ss.spawn(3)
    return {
        "wind": np.random.default_rng(wind),
        "temp": np.random.default_rng(temp),
        "ice": np.random.default_rng(ice),
    }


def _smooth_noise(rng: np.random.Generator, cfg: WorldConfig) -> np.ndarray:
    mode = "wrap" if cfg.boundary == "periodic" else "reflect"
    f = ndimage.gaussian_filter(rng.standard_normal((cfg.height, cfg.width)), cfg.wind_smoothness, mode=mode)
    return f / f.std()


def _ar1(rng: np.random.Generator, cfg: WorldConfig, n: int) -> Iterator[list[np.ndarray]]:
    state = [_smooth_noise(rng, cfg) for _ in range(n)]
    yield state
    innov = np.sqrt(1.0 - cfg.rho**2)
    while True:
        state = [cfg.rho * s + innov * _smooth_noise(rng, cfg) for s in state]
        yield state


def wind_series(cfg: WorldConfig, rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Daily ``(wind_u, wind_v)`` in m/s, speed-capped at ``wind_max``."""
    rng = rng if rng is not None else _streams(cfg)["wind"]
    for su, sv in _ar1(rng, cfg, 2):
        u, v = cfg.wind_std * su, cfg.wind_std * sv
        speed = np.hypot(u, v)
        cap = np.minimum(1.0, cfg.wind_max / np.maximum(speed, 1e-12))
        yield u * cap, v * cap


def gen_wind(cfg: WorldConfig, day: int) -> tuple[np.ndarray, np.ndarray]:
    for d, uv in enumerate(wind_series(cfg)):
        if d == day:
            return uv
    raise AssertionError("unreachable")


def drift_from_wind(wind_u: np.ndarray, wind_v: np.ndarray, cfg: WorldConfig,
                    land: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Free drift in km/day: ``alpha * R(theta) * wind + current``, zero on land."""
    th = np.deg2rad(cfg.theta)
    c, s = np.cos(th), np.sin(th)
    scale = cfg.alpha * MS_TO_KM_DAY
    u = scale * (c * wind_u + s * wind_v) + cfg.current_u
    v = scale * (-s * wind_u + c * wind_v) + cfg.current_v
    if land is not None:
        u = np.where(land > 0.5, 0.0, u)
        v = np.where(land > 0.5, 0.0, v)
    return u, v


def _neighbour_diff(f: np.ndarray, axis: int, periodic: bool) -> np.ndarray:
    if periodic:
        return (np.roll(f, -1, axis=axis) - np.roll(f, 1, axis=axis)) / 2.0
    return np.gradient(f, axis=axis)


def step_sic(A: np.ndarray, siv_u: np.ndarray, siv_v: np.ndarray, t2m: np.ndarray, cfg: WorldConfig,
             land: np.ndarray | None = None) -> np.ndarray:
    """Advance concentration one day.

    Transport is semi-Lagrangian (bilinear back-interpolation) with a
    divergence correction; ``f_c = k_f * (T_f - t2m)`` freezes or melts.
    """
    H, W = A.shape
    uc = siv_u / cfg.dx_km
    vc = siv_v / cfg.dx_km
    worst = float(max(np.abs(uc).max(), np.abs(vc).max()))
    if worst > 1.0:
        raise CFLError(f"ice moves {worst:.2f} cells/day (> 1); reduce alpha or wind_max")

    periodic = cfg.boundary == "periodic"
    rows, cols = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    # rows grow southward, so northward v raises the departure row
    dep_r = rows + vc
    dep_c = cols - uc
    if periodic:
        src = np.pad(A, 1, mode="wrap")
        ax_r, ax_c = np.arange(-1.0, H + 1.0), np.arange(-1.0, W + 1.0)
        dep_r, dep_c = np.mod(dep_r, H), np.mod(dep_c, W)
    else:
        src = A
        ax_r, ax_c = np.arange(float(H)), np.arange(float(W))
        dep_r, dep_c = np.clip(dep_r, 0, H - 1), np.clip(dep_c, 0, W - 1)
    a_dep, _ = bilinear_reproject(src, ax_c, ax_r, dep_c, dep_r)

    div = _neighbour_diff(uc, 1, periodic) - _neighbour_diff(vc, 0, periodic)
    f_c = cfg.k_f * (np.maximum(0.0, T_FREEZE - t2m) - np.maximum(0.0, t2m - T_FREEZE))
    out = np.clip(a_dep * (1.0 - div) + f_c, 0.0, 1.0)
    if land is not None:
        out = np.where(land > 0.5, A, out)
    return out


def _land(cfg: WorldConfig) -> np.ndarray:
    H, W = cfg.height, cfg.width
    land = np.zeros((H, W))
    if cfg.land == "island":
        r, c = np.mgrid[0:H, 0:W]
        rad = 0.1 * min(H, W)
        land[(r - 0.25 * H) ** 2 + (c - 0.7 * W) ** 2 <= rad**2] = 1.0
    elif cfg.land == "edge":
        land[:, : max(1, W // 16)] = 1.0
    return land


def _temperature_pattern(cfg: WorldConfig) -> np.ndarray:
    r, c = np.mgrid[0 : cfg.height, 0 : cfg.width]
    # -1 at the centre, +1 at the rim, periodic-smooth
    return 0.5 * (np.cos(2 * np.pi * r / cfg.height) + np.cos(2 * np.pi * c / cfg.width))


def gen_world(cfg: WorldConfig) -> GridStack:
    """All nine variables over ``n_days``; fully determined by ``cfg``."""
    H, W = cfg.height, cfg.width
    rngs = _streams(cfg)
    land = _land(cfg)
    pattern = _temperature_pattern(cfg)
    start = date.fromisoformat(cfg.start_date)

    x = (np.arange(W) - (W - 1) / 2.0) * cfg.dx_km
    y = ((H - 1) / 2.0 - np.arange(H)) * cfg.dx_km
    coord_x, coord_y = np.meshgrid(x, y)

    texture = _smooth_noise(rngs["ice"], cfg)
    A = np.clip(0.5 - 0.5 * pattern + 0.15 * texture, 0.0, 1.0)
    A = np.where(land > 0.5, 0.0, A)

    data = np.zeros((cfg.n_days, len(ALL_VARS), H, W), dtype=np.float32)
    winds = wind_series(cfg, rngs["wind"])
    temps = _ar1(rngs["temp"], cfg, 1)
    for d in range(cfg.n_days):
        wu, wv = next(winds)
        (tn,) = next(temps)
        doy = (start + timedelta(days=d)).timetuple().tm_yday
        season = -np.cos(2 * np.pi * (doy - 15) / 365.0)
        t2m = cfg.temp_mean + cfg.temp_amplitude * season + cfg.temp_gradient * pattern + cfg.temp_noise * tn
        su, sv = drift_from_wind(wu, wv, cfg, land)
        if d > 0:
            A = step_sic(A, su, sv, t2m, cfg, land)
        for name, val in zip(ALL_VARS, (su, sv, A, t2m, wu, wv, coord_x, coord_y, land)):
            data[d, ALL_VARS.index(name)] = val
    return GridStack(list(ALL_VARS), start, data)

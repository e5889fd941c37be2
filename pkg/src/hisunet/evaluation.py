"""Accuracy metrics, monthly/regional breakdowns, WAM maps and anomalies."""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Iterable, Mapping, Protocol

import numpy as np

from .data import NormSpec, Sample, denormalize
from .models import Model, load_checkpoint, predict_stack
from .sigd import GridStack, write_stack
from .tensor import Tensor, no_grad

REGIONS = ("none", "CA", "CBS", "LESS", "KBS", "EG", "HBB")
METRICS_HEADER = "model\tscope\tmonth\tregion\tvariable\tR\tRMSE\tMAE\tn_pixels\tr_undefined"
SIC_AREA_THRESHOLD = 0.15


def _select(x, y, mask):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        x, y = x[m], y[m]
    return x.ravel(), y.ravel()


def corr(x, y, mask=None) -> float:
    """Pearson R over valid pixels; NaN when either side has zero variance."""
    x, y = _select(x, y, mask)
    if x.size < 2:
        return math.nan
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return math.nan
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def rmse(x, y, mask=None) -> float:
    x, y = _select(x, y, mask)
    if x.size == 0:
        raise ValueError("rmse: no valid pixels")
    d = x - y
    return math.sqrt(float(d @ d) / d.size)


def mae(x, y, mask=None) -> float:
    x, y = _select(x, y, mask)
    if x.size == 0:
        raise ValueError("mae: no valid pixels")
    return float(np.abs(x - y).mean())


METRICS = {"R": corr, "RMSE": rmse, "MAE": mae}


def siv_metric(metric, pred_u, pred_v, obs_u, obs_v, mask=None) -> float:
    """Average of the metric on the u and v components."""
    fn = METRICS[metric] if isinstance(metric, str) else metric
    return 0.5 * (fn(pred_u, obs_u, mask) + fn(pred_v, obs_v, mask))


# --------------------------------------------------------------------------


class Predictor(Protocol):
    kind: str

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]: ...


class NeuralPredictor:
    """Batched, graph-free inference; pads inputs when the model needs a larger grid."""

    def __init__(self, model: Model, batch_size: int = 4):
        self.model = model
        self.kind = model.spec.kind
        self.batch_size = batch_size

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, None]:
        H, W = x.shape[2:]
        sh, sw = self.model.spec.height, self.model.spec.width
        needs_pad = self.kind == "cnn_dense" and (H, W) != (sh, sw)
        if needs_pad:
            if H > sh or W > sw:
                raise ValueError(f"input {H}x{W} larger than model grid {sh}x{sw}")
            x = np.pad(x, ((0, 0), (0, 0), (0, sh - H), (0, sw - W)))
        dtype = next(iter(self.model.params.values())).dtype
        outs = []
        with no_grad():
            for i in range(0, x.shape[0], self.batch_size):
                outs.append(predict_stack(self.model, Tensor(x[i : i + self.batch_size].astype(dtype))).data)
        out = np.concatenate(outs).astype(np.float64)
        return (out[:, :, :H, :W], None) if needs_pad else (out, None)


@dataclass
class MetricsRecord:
    model: str
    scope: str  # overall | month | region_month
    month: int  # 0 for overall
    region: str  # "all" unless region_month
    variable: str  # SIC | SIV
    R: float
    RMSE: float
    MAE: float
    n_pixels: int
    r_undefined: int

    def row(self) -> str:
        return "\t".join(
            [self.model, self.scope, str(self.month), self.region, self.variable,
             repr(self.R), repr(self.RMSE), repr(self.MAE), str(self.n_pixels), str(self.r_undefined)]
        )


def synthetic_regions(height: int, width: int, land: np.ndarray | None = None) -> np.ndarray:
    """Partition a grid into a central disc (CA) and five surrounding sectors.

    Returns integer codes indexing :data:`REGIONS`; land is ``0`` ("none").
    """
    r, c = np.mgrid[0:height, 0:width]
    dy, dx = r - (height - 1) / 2.0, c - (width - 1) / 2.0
    rad = np.hypot(dy, dx) / (0.5 * min(height, width))
    ang = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    labels = 2 + np.minimum((ang / (2 * np.pi) * 5).astype(int), 4)
    labels = np.where(rad < 0.45, 1, labels)
    if land is not None:
        labels = np.where(np.asarray(land) > 0.5, 0, labels)
    return labels.astype(np.int64)


def _scope_record(model_id, scope, month, region, pu, pv, pa, ou, ov, oa) -> list[MetricsRecord]:
    n = int(pa.size)
    r_sic = corr(pa, oa)
    r_u, r_v = corr(pu, ou), corr(pv, ov)
    r_siv = 0.5 * (r_u + r_v)
    return [
        MetricsRecord(model_id, scope, month, region, "SIC", r_sic, rmse(pa, oa), mae(pa, oa), n,
                      int(math.isnan(r_sic))),
        MetricsRecord(model_id, scope, month, region, "SIV", r_siv,
                      0.5 * (rmse(pu, ou) + rmse(pv, ov)), 0.5 * (mae(pu, ou) + mae(pv, ov)), n,
                      int(math.isnan(r_siv))),
    ]


def evaluate(
    predictor: Predictor,
    samples: list[Sample],
    norm: NormSpec,
    region_mask: np.ndarray | None = None,
    model_id: str | None = None,
    batch_size: int = 16,
) -> list[MetricsRecord]:
    """Metrics in physical units (SIC %, SIV km/day).

    Pixels are pooled across all samples of a scope: overall, per calendar
    month and per region x month. ``norm`` must be resolved. Samples are
    pooled in date order, so the result does not depend on list order.
    """
    if not samples:
        raise ValueError("evaluate: no samples")
    samples = sorted(samples, key=lambda s: s.date)
    model_id = model_id or predictor.kind
    cols: dict[str, list[np.ndarray]] = {k: [] for k in ("pu", "pv", "pa", "ou", "ov", "oa", "month", "region")}
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        x = np.concatenate([s.input for s in chunk])
        pred, valid = predictor.predict(x)
        for j, s in enumerate(chunk):
            m = s.mask.copy()
            if valid is not None:
                m &= valid
            m &= np.isfinite(pred[j]).all(axis=0)
            cols["pu"].append(denormalize(pred[j, 0][m], "siv_u", norm))
            cols["pv"].append(denormalize(pred[j, 1][m], "siv_v", norm))
            cols["pa"].append(100.0 * denormalize(pred[j, 2][m], "sic", norm))
            cols["ou"].append(denormalize(s.target[0, 0][m], "siv_u", norm))
            cols["ov"].append(denormalize(s.target[0, 1][m], "siv_v", norm))
            cols["oa"].append(100.0 * denormalize(s.target[0, 2][m], "sic", norm))
            cols["month"].append(np.full(int(m.sum()), s.date.month))
            reg = region_mask[m] if region_mask is not None else np.zeros(int(m.sum()), dtype=np.int64)
            cols["region"].append(reg)
    v = {k: np.concatenate(a) for k, a in cols.items()}
    keys = ("pu", "pv", "pa", "ou", "ov", "oa")

    records: list[MetricsRecord] = []
    if v["pa"].size == 0:
        raise ValueError("evaluate: no valid pixels")
    records += _scope_record(model_id, "overall", 0, "all", *(v[k] for k in keys))
    for month in sorted(set(v["month"].tolist())):
        sel = v["month"] == month
        records += _scope_record(model_id, "month", month, "all", *(v[k][sel] for k in keys))
        if region_mask is None:
            continue
        for code in sorted(set(v["region"][sel].tolist())):
            if code == 0:
                continue
            rs = sel & (v["region"] == code)
            records += _scope_record(model_id, "region_month", month, REGIONS[code], *(v[k][rs] for k in keys))
    return records


def write_metrics(path: str | Path, records: Iterable[MetricsRecord], append: bool = False) -> None:
    p = Path(path)
    lines = [r.row() for r in records]
    if append and p.exists():
        with p.open("a") as fh:
            fh.write("".join(line + "\n" for line in lines))
    else:
        p.write_text(METRICS_HEADER + "\n" + "".join(line + "\n" for line in lines))


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    rows = Path(path).read_text().splitlines()
    if not rows or rows[0] != METRICS_HEADER:
        raise ValueError(f"{path}: not a metrics table")
    out = []
    for line in rows[1:]:
        f = line.split("\t")
        out.append(MetricsRecord(f[0], f[1], int(f[2]), f[3], f[4], float(f[5]), float(f[6]), float(f[7]),
                                 int(f[8]), int(f[9])))
    return out


# --------------------------------------------------------------------------


WAM_GRIDS = ("a_in_siv", "a_in_sic", "a_out_siv", "a_out_sic")


def export_wam_maps(source: Model | str | Path) -> dict[int, dict[str, np.ndarray]]:
    """Channel-mean ``H x W`` map of every WAM weight grid, keyed by level 1..6."""
    model = source if isinstance(source, Model) else load_checkpoint(source)[0]
    if model.spec.kind != "his_unet":
        raise ValueError(f"WAM maps need an his_unet checkpoint, got {model.spec.kind!r}")
    maps = {}
    for level, wam in enumerate(model.wams, start=1):
        maps[level] = {name: t.data[0].astype(np.float64).mean(axis=0) for name, t in wam.grids().items()}
    return maps


def write_wam_maps(out_dir: str | Path, maps: dict[int, dict[str, np.ndarray]], start="2000-01-01") -> list[Path]:
    """One SIGD file per level (``wam<level>.sigd``), one day, four variables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for level, grids in maps.items():
        data = np.stack([grids[n] for n in WAM_GRIDS])[None]
        p = out / f"wam{level}.sigd"
        write_stack(p, GridStack(list(WAM_GRIDS), date.fromisoformat(start), data))
        paths.append(p)
    return paths


# --------------------------------------------------------------------------


def monthly_means(stack: GridStack, var: str) -> dict[int, dict[int, np.ndarray]]:
    """``{year: {month: mean grid}}`` from daily data (NaN-aware)."""
    vals = stack.var(var).astype(np.float64)
    groups: dict[tuple[int, int], list[int]] = {}
    for d, day in enumerate(stack.dates):
        groups.setdefault((day.year, day.month), []).append(d)
    out: dict[int, dict[int, np.ndarray]] = {}
    for (y, m), idx in sorted(groups.items()):
        with np.errstate(invalid="ignore"):
            sub = vals[idx]
            good = np.isfinite(sub)
            cnt = good.sum(axis=0)
            mean = np.where(cnt > 0, np.where(good, sub, 0.0).sum(axis=0) / np.maximum(cnt, 1), np.nan)
        out.setdefault(y, {})[m] = mean
    return out


def sea_ice_area(sic: np.ndarray, cell_area: float = 625.0, threshold: float = SIC_AREA_THRESHOLD) -> float:
    """Area (``cell_area`` units, default km^2 of a 25 km cell) where SIC exceeds the threshold."""
    sic = np.asarray(sic, dtype=np.float64)
    return float(np.sum(np.nan_to_num(sic, nan=0.0) > threshold) * cell_area)


@dataclass
class Anomaly:
    month: int
    scalar: float
    grid: np.ndarray | None


@dataclass
class AnomalyResult:
    months: dict[int, Anomaly]
    gaps: list[int]


def anomaly(
    monthly: Mapping[int, Mapping[int, np.ndarray | float]],
    baseline_years: Iterable[int],
    target_year: int,
) -> AnomalyResult:
    """Target-year monthly value minus the baseline-years mean for that month.

    Values may be grids or scalars; the scalar anomaly of a grid is its
    area mean. Months missing from the target year or from every baseline
    year are reported in ``gaps``.
    """
    baseline_years = list(baseline_years)
    if not baseline_years:
        raise ValueError("anomaly: empty baseline")
    months: dict[int, Anomaly] = {}
    gaps = []
    for month in range(1, 13):
        tgt = monthly.get(target_year, {}).get(month)
        base = [np.asarray(monthly[y][month], dtype=np.float64) for y in baseline_years
                if month in monthly.get(y, {})]
        if tgt is None or not base:
            gaps.append(month)
            continue
        diff = np.asarray(tgt, dtype=np.float64) - np.mean(base, axis=0)
        if diff.ndim == 0:
            months[month] = Anomaly(month, float(diff), None)
        else:
            months[month] = Anomaly(month, float(np.nanmean(diff)), diff)
    return AnomalyResult(months, gaps)

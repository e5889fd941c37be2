"""SIGD grid-stack container.

Layout (little-endian)::

    b"SIGD1"
    u32 H, u32 W, u32 n_vars, u32 n_days
    n_vars x (u32 len, utf-8 variable name)
    u32 len, ISO-8601 start date
    n_days x n_vars x H x W float32, row-major; quiet NaN marks missing

Day ``d`` is ``start + d`` days; a day whose grid is entirely NaN is absent.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path

import numpy as np

MAGIC = b"SIGD1"


class SigdError(ValueError):
    """Malformed or unsupported SIGD content."""


@dataclass
class VarGrid:
    var: str
    date: date
    values: np.ndarray
    mask: np.ndarray  # True where valid


@dataclass
class GridStack:
    """Daily grids for several variables: ``data[day, var, i, j]``."""

    variables: list[str]
    start: date
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[1] != len(self.variables):
            raise SigdError(f"data shape {self.data.shape} does not match {len(self.variables)} variables")

    @property
    def n_days(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]

    @property
    def dates(self) -> list[date]:
        return [self.start + timedelta(days=d) for d in range(self.n_days)]

    def index(self, var: str) -> int:
        try:
            return self.variables.index(var)
        except ValueError:
            raise KeyError(f"variable {var!r} not in stack ({', '.join(self.variables)})") from None

    def var(self, name: str) -> np.ndarray:
        return self.data[:, self.index(name)]

    def grid(self, day: int, name: str) -> VarGrid:
        values = self.data[day, self.index(name)].astype(np.float64)
        return VarGrid(name, self.start + timedelta(days=day), values, np.isfinite(values))

    def to_vargrids(self) -> list[VarGrid]:
        return [self.grid(d, v) for d in range(self.n_days) for v in self.variables]

    @classmethod
    def from_vargrids(cls, grids: list[VarGrid]) -> "GridStack":
        if not grids:
            raise SigdError("no grids")
        variables = list(dict.fromkeys(g.var for g in grids))
        start = min(g.date for g in grids)
        n_days = (max(g.date for g in grids) - start).days + 1
        H, W = grids[0].values.shape
        data = np.full((n_days, len(variables), H, W), np.nan, dtype=np.float32)
        for g in grids:
            vals = np.where(g.mask, g.values, np.nan)
            data[(g.date - start).days, variables.index(g.var)] = vals
        return cls(variables, start, data)


def encode(stack: GridStack) -> bytes:
    n_days, n_vars, H, W = stack.data.shape
    parts = [MAGIC, struct.pack("<4I", H, W, n_vars, n_days)]
    for name in stack.variables:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    iso = stack.start.isoformat().encode("ascii")
    parts.append(struct.pack("<I", len(iso)) + iso)
    parts.append(np.ascontiguousarray(stack.data, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> GridStack:
    if len(blob) < len(MAGIC) or blob[:4] != MAGIC[:4]:
        raise SigdError("not a SIGD file: bad magic")
    if blob[: len(MAGIC)] != MAGIC:
        raise SigdError(f"unsupported SIGD version {blob[4:5]!r}")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise SigdError(f"SIGD truncated at byte {pos} (need {n} more)")
        out = blob[pos : pos + n]
        pos += n
        return out

    H, W, n_vars, n_days = struct.unpack("<4I", take(16))
    names = []
    for _ in range(n_vars):
        (n,) = struct.unpack("<I", take(4))
        names.append(take(n).decode("utf-8"))
    (n,) = struct.unpack("<I", take(4))
    start = date.fromisoformat(take(n).decode("ascii"))
    body = take(4 * n_days * n_vars * H * W)
    if pos != len(blob):
        raise SigdError(f"{len(blob) - pos} trailing bytes after SIGD body")
    data = np.frombuffer(body, dtype="<f4").reshape(n_days, n_vars, H, W).astype(np.float32)
    return GridStack(names, start, data)


def write_stack(path: str | Path, stack: GridStack) -> None:
    Path(path).write_bytes(encode(stack))


def read_stack(path: str | Path) -> GridStack:
    return decode(Path(path).read_bytes())

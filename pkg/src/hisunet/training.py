"""Masked multi-task loss, Adam, and the epoch loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Sample, stack_batch
from .models import Model, deserialize, predict_stack, save_checkpoint, serialize
from .tensor import Tensor, ew, no_grad, scale, total

log = logging.getLogger(__name__)

STATE_FILE = "state.hsun"
BEST_FILE = "model.hsun"
HISTORY_FILE = "history.tsv"
HISTORY_HEADER = "epoch\ttrain_loss\tval_loss\twall_seconds"


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    beta: float = 0.5
    batch_size: int = 4
    seed: int = 0
    precision: str = "float64"
    checkpoint_every: int = 1

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


def masked_loss(pred: Tensor, target, mask, beta: float = 0.5) -> Tensor:
    """Mean over valid pixels of ``du^2 + dv^2 + beta * dA^2``.

    ``pred`` and ``target`` are ``(B, 3, H, W)`` with channels ``u, v, A``;
    ``mask`` is ``(B, 1, H, W)`` (or ``(B, H, W)``) with 1 on valid pixels.
    """
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=pred.dtype)
    if m.ndim == 3:
        m = m[:, None]
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    n_valid = float(m.sum())
    if n_valid == 0:
        raise ValueError("masked_loss: mask has no valid pixels")
    weights = np.array([1.0, 1.0, beta], dtype=pred.dtype).reshape(1, 3, 1, 1)
    diff = ew(pred, target, "sub")
    sq = ew(ew(diff, diff, "mul"), Tensor(weights), "mul")
    return scale(total(ew(sq, Tensor(m), "mul")), 1.0 / n_valid)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place. Parameters without a gradient are skipped."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    wall_seconds: float


@dataclass
class TrainState:
    epoch: int = 0
    adam: AdamState = field(default_factory=AdamState)
    history: list[EpochRecord] = field(default_factory=list)
    best_val: float = math.inf
    best_params: dict[str, np.ndarray] | None = None


def _batches(n: int, size: int, order: np.ndarray) -> list[np.ndarray]:
    return [order[i : i + size] for i in range(0, n, size)]


def dataset_loss(model: Model, samples: list[Sample], cfg: TrainConfig) -> float:
    """Pixel-weighted loss over a whole sample list (no graph)."""
    sse, count = 0.0, 0.0
    with no_grad():
        for idx in _batches(len(samples), cfg.batch_size, np.arange(len(samples))):
            x, y, m = stack_batch([samples[i] for i in idx], cfg.dtype)
            n = float(m.sum())
            if n == 0:
                continue
            loss = masked_loss(predict_stack(model, Tensor(x)), y, m, cfg.beta)
            sse += float(loss.data.reshape(())) * n
            count += n
    if count == 0:
        raise ValueError("no valid pixels in dataset")
    return sse / count


def train(
    model: Model,
    train_set: list[Sample],
    val_set: list[Sample],
    cfg: TrainConfig,
    state: TrainState | None = None,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainState:
    """Run ``cfg.epochs`` epochs (on top of ``state`` when resuming).

    Each epoch reshuffles from ``(cfg.seed, epoch)`` so a resumed run follows
    the uninterrupted trajectory exactly. With ``out_dir`` the resumable
    state, best-validation model and history are written there.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    model.astype(cfg.dtype)
    state = state if state is not None else TrainState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    n = len(train_set)
    for _ in range(cfg.epochs):
        epoch = state.epoch
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sse, count = 0.0, 0.0
        for b, idx in enumerate(_batches(n, cfg.batch_size, order)):
            x, y, m = stack_batch([train_set[i] for i in idx], cfg.dtype)
            nv = float(m.sum())
            if nv == 0:
                continue
            loss = masked_loss(predict_stack(model, Tensor(x)), y, m, cfg.beta)
            value = float(loss.data.reshape(()))
            if not math.isfinite(value):
                raise TrainingDiverged(epoch + 1, b, value)
            model.zero_grad()
            loss.backward()
            adam_step(model.params, state.adam, cfg.lr)
            sse += value * nv
            count += nv
        train_loss = sse / count
        val_loss = dataset_loss(model, val_set, cfg)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(epoch + 1, -1, val_loss)
        state.epoch = epoch + 1
        rec = EpochRecord(state.epoch, train_loss, val_loss, time.perf_counter() - t0)
        state.history.append(rec)
        if val_loss < state.best_val:
            state.best_val = val_loss
            state.best_params = model.state_arrays()
        log.info("epoch %d train %.6g val %.6g (%.1fs)", rec.epoch, train_loss, val_loss, rec.wall_seconds)
        if on_epoch is not None:
            on_epoch(rec)
        if out is not None and (state.epoch % cfg.checkpoint_every == 0 or _ == cfg.epochs - 1):
            save_train_state(out, model, state)
    model.zero_grad()
    return state


# --------------------------------------------------------------------------
# persistence of training state


def write_history(path: str | Path, history: list[EpochRecord]) -> None:
    lines = [HISTORY_HEADER]
    lines += [f"{r.epoch}\t{r.train_loss!r}\t{r.val_loss!r}\t{r.wall_seconds:.3f}" for r in history]
    Path(path).write_text("\n".join(lines) + "\n")


def read_history(path: str | Path) -> list[EpochRecord]:
    rows = Path(path).read_text().splitlines()
    if not rows or rows[0] != HISTORY_HEADER:
        raise ValueError(f"{path}: not a history file")
    out = []
    for line in rows[1:]:
        e, tr, va, ws = line.split("\t")
        out.append(EpochRecord(int(e), float(tr), float(va), float(ws)))
    return out


def save_train_state(out_dir: str | Path, model: Model, state: TrainState) -> None:
    out = Path(out_dir)
    extra = {}
    for k, arr in state.adam.m.items():
        extra[f"adam.m.{k}"] = arr
        extra[f"adam.v.{k}"] = state.adam.v[k]
    if state.best_params is not None:
        extra.update({f"best.{k}": v for k, v in state.best_params.items()})
    meta = {
        "epoch": str(state.epoch),
        "adam_step": str(state.adam.step),
        "dtype": str(next(iter(model.params.values())).dtype),
        "best_val": state.best_val.hex(),
        # wall-clock times live only in history.tsv so identical runs give identical bytes
        "history": ";".join(f"{r.epoch},{r.train_loss.hex()},{r.val_loss.hex()}" for r in state.history),
    }
    arrays = model.state_arrays()
    arrays.update(extra)
    (out / STATE_FILE).write_bytes(serialize(model.spec, arrays, meta))
    if state.best_params is not None:
        best = Model(model.spec)
        best.load_arrays(state.best_params)
        save_checkpoint(out / BEST_FILE, best, meta={"epoch": str(state.epoch), "best_val": repr(state.best_val)})
    write_history(out / HISTORY_FILE, state.history)


def load_train_state(path: str | Path) -> tuple[Model, TrainState]:
    p = Path(path)
    if p.is_dir():
        p = p / STATE_FILE
    spec, arrays, meta = deserialize(p.read_bytes())
    model = Model(spec)
    dtype = np.dtype(meta.get("dtype", "float64"))
    model.load_arrays({k: v for k, v in arrays.items() if k in model.params})
    model.astype(dtype)
    adam = AdamState(step=int(meta["adam_step"]))
    best: dict[str, np.ndarray] = {}
    for k, v in arrays.items():
        if k.startswith("adam.m."):
            adam.m[k[7:]] = v.astype(dtype)
        elif k.startswith("adam.v."):
            adam.v[k[7:]] = v.astype(dtype)
        elif k.startswith("best."):
            best[k[5:]] = v.astype(dtype)
    walls = {}
    if (p.parent / HISTORY_FILE).exists():
        walls = {r.epoch: r.wall_seconds for r in read_history(p.parent / HISTORY_FILE)}
    history = []
    if meta.get("history"):
        for item in meta["history"].split(";"):
            e, tr, va = item.split(",")
            history.append(EpochRecord(int(e), float.fromhex(tr), float.fromhex(va), walls.get(int(e), 0.0)))
    state = TrainState(
        epoch=int(meta["epoch"]),
        adam=adam,
        history=history,
        best_val=float.fromhex(meta["best_val"]),
        best_params=best or None,
    )
    return model, state

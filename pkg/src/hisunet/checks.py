"""Finite-difference gradient checks for every differentiable op."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .attention import AttnPair, WamParams, cbam_apply, wam_forward
from .tensor import Tensor, grad_check
from .training import masked_loss

TOLERANCE = 1e-4
EPS = 1e-5


@dataclass
class CheckResult:
    op: str
    wrt: str
    seed: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op:<18} wrt={self.wrt:<14} seed={self.seed} max_rel_err={self.max_rel_error:.3e}"


def _distinct(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Values at least 0.05 apart so max/relu ties cannot flip under a 1e-5 probe."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2.0) * 0.05 + 0.025
    return vals.reshape(shape)


def _weighted(out: Tensor, rng_w: np.ndarray) -> Tensor:
    return T.total(T.ew(out, Tensor(rng_w), "mul"))


Case = tuple[str, str, Callable[[Tensor], Tensor], np.ndarray]


def _cases(seed: int) -> Iterator[Case]:
    rng = np.random.default_rng(seed)
    n = rng.standard_normal

    # conv2d
    x, k, b = n((2, 3, 5, 5)), n((4, 3, 3, 3)) * 0.3, n(4)
    r = n((2, 4, 5, 5))
    yield "conv2d", "x", lambda t: _weighted(T.activation(T.conv2d(t, Tensor(k), Tensor(b)), "tanh"), r), x
    yield "conv2d", "kernel", lambda t: _weighted(T.activation(T.conv2d(Tensor(x), t, Tensor(b)), "tanh"), r), k
    yield "conv2d", "bias", lambda t: _weighted(T.activation(T.conv2d(Tensor(x), Tensor(k), t), "tanh"), r), b

    # conv_transpose2d
    x2, k2, b2 = n((2, 3, 3, 3)), n((3, 2, 2, 2)), n(2)
    r2 = n((2, 2, 6, 6))
    yield "conv_transpose2d", "x", lambda t: _weighted(T.activation(T.conv_transpose2d(t, Tensor(k2), Tensor(b2)), "tanh"), r2), x2
    yield "conv_transpose2d", "kernel", lambda t: _weighted(T.activation(T.conv_transpose2d(Tensor(x2), t, Tensor(b2)), "tanh"), r2), k2
    yield "conv_transpose2d", "bias", lambda t: _weighted(T.activation(T.conv_transpose2d(Tensor(x2), Tensor(k2), t), "tanh"), r2), b2

    # pooling
    xp = _distinct(rng, (2, 3, 4, 6))
    rm = n((2, 3, 2, 3))
    yield "maxpool2d", "x", lambda t: _weighted(T.maxpool2d(t), rm), xp
    for mode in ("avg", "max"):
        rs, rc = n((2, 3, 1, 1)), n((2, 1, 4, 6))
        yield f"pool_spatial_{mode}", "x", lambda t, m=mode, w=rs: _weighted(T.pool_spatial(t, m), w), xp
        yield f"pool_channel_{mode}", "x", lambda t, m=mode, w=rc: _weighted(T.pool_channel(t, m), w), xp

    # activations
    xa = _distinct(rng, (2, 2, 3, 3))
    for kind in ("tanh", "sigmoid", "relu"):
        ra = n((2, 2, 3, 3))
        yield f"activation_{kind}", "x", lambda t, kd=kind, w=ra: _weighted(T.activation(t, kd), w), xa

    # dense
    xd, wd, bd = n((3, 5, 1, 1)), n((4, 5)), n(4)
    rd = n((3, 4, 1, 1))
    yield "dense", "x", lambda t: _weighted(T.activation(T.dense(t, Tensor(wd), Tensor(bd)), "tanh"), rd), xd
    yield "dense", "weight", lambda t: _weighted(T.activation(T.dense(Tensor(xd), t, Tensor(bd)), "tanh"), rd), wd
    yield "dense", "bias", lambda t: _weighted(T.activation(T.dense(Tensor(xd), Tensor(wd), t), "tanh"), rd), bd

    # elementwise with broadcast
    xe = n((2, 3, 4, 4))
    re = n((2, 3, 4, 4))
    for op in ("add", "sub", "mul"):
        for shape in ((2, 3, 4, 4), (2, 3, 1, 1), (2, 1, 4, 4), (1, 3, 4, 4)):
            ye = n(shape)
            tag = "x".join(map(str, shape))
            yield f"ew_{op}", f"x[{tag}]", lambda t, o=op, y=ye: _weighted(T.activation(T.ew(t, Tensor(y), o), "tanh"), re), xe
            yield f"ew_{op}", f"y[{tag}]", lambda t, o=op: _weighted(T.activation(T.ew(Tensor(xe), t, o), "tanh"), re), ye

    # cbam
    C, H, W = 8, 4, 4
    xc = n((2, C, H, W))
    rc = n((2, C, H, W))
    pair = _live_pair(C, seed + 1000)
    yield "cbam_apply", "x", lambda t: _weighted(cbam_apply(t, pair), rc), xc
    for pname, pt in pair.tensors().items():
        def f(t, pn=pname):
            p2 = _live_pair(C, seed + 1000)
            _swap(p2, pn, t)
            return _weighted(cbam_apply(Tensor(xc), p2), rc)
        yield "cbam_apply", pname, f, pt.data.copy()

    # wam
    xs, xi = n((2, C, H, W)), n((2, C, H, W))
    r_siv, r_sic = n((2, C, H, W)), n((2, C, H, W))
    base = WamParams.init(C, H, W, np.random.default_rng(seed + 2000))
    grids0 = {g: 0.5 + 0.3 * n((1, C, H, W)) for g in base.grids()}

    def wam_loss(p: WamParams, a: Tensor, b: Tensor) -> Tensor:
        o1, o2 = wam_forward(a, b, p)
        return T.ew(_weighted(o1, r_siv), _weighted(o2, r_sic), "add")

    def fresh() -> WamParams:
        p = WamParams.init(C, H, W, np.random.default_rng(seed + 2000))
        for g, arr in grids0.items():
            getattr(p, g).data = arr
        return p

    yield "wam_forward", "xi_siv", lambda t: wam_loss(fresh(), t, Tensor(xi)), xs
    yield "wam_forward", "xi_sic", lambda t: wam_loss(fresh(), Tensor(xs), t), xi
    for g in base.grids():
        def fg(t, gname=g):
            p = fresh()
            setattr(p, gname, t)
            return wam_loss(p, Tensor(xs), Tensor(xi))
        yield "wam_forward", g, fg, grids0[g]

    # masked loss
    pred = n((2, 3, 4, 4))
    tgt = n((2, 3, 4, 4))
    mask = (rng.random((2, 1, 4, 4)) > 0.3).astype(float)
    mask[0, 0, 0, 0] = 1.0
    yield "masked_loss", "pred", lambda t: masked_loss(t, tgt, mask, 0.5), pred


def _live_pair(channels: int, seed: int) -> AttnPair:
    # positive hidden bias keeps the MLP's relu units active, so its weights get non-zero gradients
    pair = AttnPair.init(channels, np.random.default_rng(seed))
    pair.channel.b1.data = np.abs(pair.channel.b1.data) + 1.0
    return pair


def _swap(pair: AttnPair, name: str, t: Tensor) -> None:
    group, attr = name.split(".")
    holder = pair.channel if group == "ca" else pair.spatial
    setattr(holder, attr, t)


def run_gradcheck_suite(seeds: int = 5, eps: float = EPS, tol: float = TOLERANCE) -> list[CheckResult]:
    results = []
    for seed in range(seeds):
        for op, wrt, f, x in _cases(seed):
            results.append(CheckResult(op, wrt, seed, grad_check(f, x, eps), tol))
    return results


def report(results: list[CheckResult], elapsed: float | None = None) -> str:
    lines = [r.line() for r in results]
    worst: dict[str, float] = {}
    for r in results:
        worst[r.op] = max(worst.get(r.op, 0.0), r.max_rel_error)
    lines.append("")
    for op, err in worst.items():
        lines.append(f"{'PASS' if err < results[0].tolerance else 'FAIL'} {op:<18} worst={err:.3e}")
    n_fail = sum(not r.passed for r in results)
    tail = f"{len(results) - n_fail}/{len(results)} checks passed"
    if elapsed is not None:
        tail += f" in {elapsed:.1f}s"
    lines.append(tail)
    return "\n".join(lines)


def main(seeds: int = 5, eps: float = EPS, tol: float = TOLERANCE) -> tuple[bool, str]:
    t0 = time.perf_counter()
    results = run_gradcheck_suite(seeds, eps, tol)
    text = report(results, time.perf_counter() - t0)
    return all(r.passed for r in results), text

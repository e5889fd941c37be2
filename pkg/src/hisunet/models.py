"""Neural forecasting models and their checkpoint format.

All models map a ``(B, 20, H, W)`` normalized input stack to three
``(B, 1, H, W)`` maps ``(u, v, A)`` in normalized ``[-1, 1]`` space.

Parameter names are shared across the U-net family so that weights can be
copied between, e.g., an EB-Unet and an HIS-Unet of the same spec.
"""

from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .attention import WamParams, wam_forward
from .tensor import (
    ShapeError,
    Tensor,
    activation,
    channels,
    concat,
    conv2d,
    conv_transpose2d,
    dense,
    flatten,
    maxpool2d,
    reshape,
)

NEURAL_KINDS = ("his_unet", "eb_unet", "lb_unet", "unet", "fcn7", "cnn_dense")
ALL_KINDS = NEURAL_KINDS + ("persistence", "linreg")
BRANCHES = ("siv", "sic")
FCN7_LAYERS = 7
FCN7_WIDTH = 64
CNN_DENSE_STAGES = 5


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "his_unet"
    stem_channels: int = 32
    depth: int = 3
    input_channels: int = 20
    output_channels: int = 3
    activation: str = "tanh"
    height: int = 256
    width: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {', '.join(ALL_KINDS)}")
        if self.output_channels != 3:
            raise ValueError("output_channels must be 3 (u, v, A)")

    @property
    def ladder(self) -> list[int]:
        """Channel width per level, stem first: 32, 64, 128, 256 for depth 3."""
        return [self.stem_channels * 2**i for i in range(self.depth + 1)]

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ModelSpec":
        kw = {}
        for f in fields(cls):
            if f.name in values:
                kw[f.name] = values[f.name] if f.type == "str" else int(values[f.name])
        return cls(**kw)

    def check_input(self, height: int, width: int) -> None:
        mult = 2**CNN_DENSE_STAGES if self.kind == "cnn_dense" else 2**self.depth
        if self.kind == "fcn7":
            mult = 1
        for dim, n in (("height", height), ("width", width)):
            if n % mult:
                raise ShapeError(f"{self.kind}: {dim} {n} is not a multiple of {mult}", dim=dim)


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """A neural model: spec, named parameters and a forward pass.

    Parameters are created in a fixed order from ``spec.seed`` so two models
    built from equal specs are bitwise identical.
    """

    def __init__(self, spec: ModelSpec):
        if spec.kind not in NEURAL_KINDS:
            raise ValueError(f"{spec.kind!r} is not a neural model")
        spec.check_input(spec.height, spec.width)
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.wams: list[WamParams] = []
        self._rng = np.random.default_rng(spec.seed)
        getattr(self, f"_build_{spec.kind}")()
        del self._rng

    # ---- parameter registration -------------------------------------------

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _conv(self, name: str, cin: int, cout: int, k: int = 3) -> None:
        fan_in = cin * k * k
        self._add(f"{name}.w", _uniform(self._rng, (cout, cin, k, k), fan_in))
        self._add(f"{name}.b", _uniform(self._rng, (cout,), fan_in))

    def _upconv(self, name: str, cin: int, cout: int) -> None:
        self._add(f"{name}.w", _uniform(self._rng, (cin, cout, 2, 2), cin))
        self._add(f"{name}.b", _uniform(self._rng, (cout,), cin))

    def _unet_encoder(self, prefix: str, shared_stem: bool) -> None:
        lad = self.spec.ladder
        if not shared_stem:
            self._conv(f"{prefix}enc1.conv1", self.spec.input_channels, lad[0])
        self._conv(f"{prefix}enc1.conv2", lad[0], lad[0])
        for lvl in range(2, self.spec.depth + 1):
            self._conv(f"{prefix}enc{lvl}.conv1", lad[lvl - 2], lad[lvl - 1])
            self._conv(f"{prefix}enc{lvl}.conv2", lad[lvl - 1], lad[lvl - 1])
        self._conv(f"{prefix}mid.conv1", lad[-2], lad[-1])
        self._conv(f"{prefix}mid.conv2", lad[-1], lad[-1])

    def _unet_decoder(self, prefix: str, last_conv: bool = True) -> None:
        lad = self.spec.ladder
        for lvl in range(self.spec.depth, 0, -1):
            c = lad[lvl - 1]
            self._upconv(f"{prefix}dec{lvl}.up", 2 * c, c)
            self._conv(f"{prefix}dec{lvl}.conv1", 2 * c, c)
            if lvl > 1 or last_conv:
                self._conv(f"{prefix}dec{lvl}.conv2", c, c)

    def _head(self, name: str, cin: int, cout: int, k: int = 1) -> None:
        self._conv(name, cin, cout, k)

    def _build_two_branch(self, with_wams: bool) -> None:
        lad = self.spec.ladder
        self._conv("enc1.conv1", self.spec.input_channels, lad[0])
        for br in BRANCHES:
            self._unet_encoder(f"{br}.", shared_stem=True)
            self._unet_decoder(f"{br}.")
        self._head("siv.head", lad[0], 2)
        self._head("sic.head", lad[0], 1)
        if with_wams:
            d = self.spec.depth
            H, W = self.spec.height, self.spec.width
            # encoder WAMs sit after each pool, decoder WAMs after each up-conv
            levels = [(lad[l - 1], l) for l in range(1, d + 1)] + [(lad[l - 1], l - 1) for l in range(d, 0, -1)]
            for i, (c, down) in enumerate(levels, start=1):
                wam = WamParams.init(c, H // 2**down, W // 2**down, self._rng)
                for k, t in wam.tensors().items():
                    t.name = f"wam{i}.{k}"
                    self.params[t.name] = t
                self.wams.append(wam)

    def _build_his_unet(self) -> None:
        self._build_two_branch(with_wams=True)

    def _build_eb_unet(self) -> None:
        self._build_two_branch(with_wams=False)

    def _build_unet(self) -> None:
        self._unet_encoder("", shared_stem=False)
        self._unet_decoder("")
        self._head("head", self.spec.ladder[0], 3)

    def _build_lb_unet(self) -> None:
        c = self.spec.ladder[0]
        self._unet_encoder("", shared_stem=False)
        self._unet_decoder("", last_conv=False)
        for br, n in (("siv", 2), ("sic", 1)):
            self._conv(f"{br}.dec1.conv2", c, c)
            self._head(f"{br}.head", c, n)

    def _build_fcn7(self) -> None:
        cin = self.spec.input_channels
        for i in range(1, FCN7_LAYERS + 1):
            self._conv(f"conv{i}", cin, FCN7_WIDTH)
            cin = FCN7_WIDTH
        # 3x3 output layer: receptive field 2*8+1 = 17 px
        self._head("head", FCN7_WIDTH, 3, k=3)

    def cnn_dense_widths(self) -> list[int]:
        s = self.spec.stem_channels
        return [min(s * 2**i, 4 * s) for i in range(CNN_DENSE_STAGES)]

    def _build_cnn_dense(self) -> None:
        cin = self.spec.input_channels
        for i, c in enumerate(self.cnn_dense_widths(), start=1):
            self._conv(f"conv{i}", cin, c)
            cin = c
        H, W = self.spec.height, self.spec.width
        n_in = (H // 2**CNN_DENSE_STAGES) * (W // 2**CNN_DENSE_STAGES) * cin
        n_out = 3 * H * W
        self._add("dense.w", _uniform(self._rng, (n_out, n_in), n_in))
        self._add("dense.b", _uniform(self._rng, (n_out,), n_in))

    # ---- state helpers -----------------------------------------------------

    @property
    def identity_attention(self) -> bool:
        return bool(self.wams) and all(w.identity for w in self.wams)

    @identity_attention.setter
    def identity_attention(self, flag: bool) -> None:
        for w in self.wams:
            w.identity = flag

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype) -> "Model":
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = set(self.params) - set(arrays)
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, arr in arrays.items():
            if k not in self.params:
                if strict:
                    raise KeyError(f"unexpected parameter {k!r}")
                continue
            t = self.params[k]
            if t.shape != arr.shape:
                raise ShapeError(f"parameter {k}: shape {arr.shape} != {t.shape}", dim=k)
            t.data = np.array(arr, dtype=t.dtype)

    # ---- forward -------------------------------------------------------------

    def _c(self, x: Tensor, name: str) -> Tensor:
        return activation(conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"]), self.spec.activation)

    def _up(self, x: Tensor, name: str) -> Tensor:
        return conv_transpose2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _head_out(self, x: Tensor, name: str) -> Tensor:
        return activation(conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"]), "tanh")

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return self.forward(x)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        if x.data.ndim != 4:
            raise ShapeError(f"expected (B, C, H, W) input, got {x.shape}", dim="rank")
        if x.shape[1] != self.spec.input_channels:
            raise ShapeError(f"input has {x.shape[1]} channels, model expects {self.spec.input_channels}", dim="channels")
        H, W = x.shape[2:]
        self.spec.check_input(H, W)
        if (self.wams or self.spec.kind == "cnn_dense") and (H, W) != (self.spec.height, self.spec.width):
            raise ShapeError(
                f"{self.spec.kind} is built for {self.spec.height}x{self.spec.width}, got {H}x{W}", dim="height"
            )
        kind = self.spec.kind
        if kind in ("his_unet", "eb_unet"):
            return self._forward_two_branch(x)
        return getattr(self, f"_forward_{kind}")(x)

    def _forward_two_branch(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        d = self.spec.depth
        stem = self._c(x, "enc1.conv1")
        h = {"siv": stem, "sic": stem}
        skips: dict[str, list[Tensor]] = {"siv": [], "sic": []}
        wam_iter = iter(self.wams)

        def exchange() -> None:
            wam = next(wam_iter, None)
            if wam is not None:
                h["siv"], h["sic"] = wam_forward(h["siv"], h["sic"], wam)

        for lvl in range(1, d + 1):
            for br in BRANCHES:
                t = h[br]
                if lvl > 1:
                    t = self._c(t, f"{br}.enc{lvl}.conv1")
                t = self._c(t, f"{br}.enc{lvl}.conv2")
                skips[br].append(t)
                h[br] = maxpool2d(t)
            exchange()
        for br in BRANCHES:
            h[br] = self._c(self._c(h[br], f"{br}.mid.conv1"), f"{br}.mid.conv2")
        for lvl in range(d, 0, -1):
            for br in BRANCHES:
                h[br] = self._up(h[br], f"{br}.dec{lvl}.up")
            exchange()
            for br in BRANCHES:
                t = concat([skips[br][lvl - 1], h[br]], axis=1)
                h[br] = self._c(self._c(t, f"{br}.dec{lvl}.conv1"), f"{br}.dec{lvl}.conv2")
        siv = self._head_out(h["siv"], "siv.head")
        sic = self._head_out(h["sic"], "sic.head")
        return channels(siv, 0, 1), channels(siv, 1, 2), sic

    def _trunk(self, x: Tensor, last_conv: bool) -> Tensor:
        d = self.spec.depth
        skips = []
        t = self._c(x, "enc1.conv1")
        for lvl in range(1, d + 1):
            if lvl > 1:
                t = self._c(t, f"enc{lvl}.conv1")
            t = self._c(t, f"enc{lvl}.conv2")
            skips.append(t)
            t = maxpool2d(t)
        t = self._c(self._c(t, "mid.conv1"), "mid.conv2")
        for lvl in range(d, 0, -1):
            t = concat([skips[lvl - 1], self._up(t, f"dec{lvl}.up")], axis=1)
            t = self._c(t, f"dec{lvl}.conv1")
            if lvl > 1 or last_conv:
                t = self._c(t, f"dec{lvl}.conv2")
        return t

    def _forward_unet(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        out = self._head_out(self._trunk(x, last_conv=True), "head")
        return channels(out, 0, 1), channels(out, 1, 2), channels(out, 2, 3)

    def _forward_lb_unet(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        t = self._trunk(x, last_conv=False)
        siv = self._head_out(self._c(t, "siv.dec1.conv2"), "siv.head")
        sic = self._head_out(self._c(t, "sic.dec1.conv2"), "sic.head")
        return channels(siv, 0, 1), channels(siv, 1, 2), sic

    def _forward_fcn7(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        t = x
        for i in range(1, FCN7_LAYERS + 1):
            t = self._c(t, f"conv{i}")
        out = self._head_out(t, "head")
        return channels(out, 0, 1), channels(out, 1, 2), channels(out, 2, 3)

    def _forward_cnn_dense(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        B, _, H, W = x.shape
        t = x
        for i in range(1, CNN_DENSE_STAGES + 1):
            t = maxpool2d(self._c(t, f"conv{i}"))
        out = dense(flatten(t), self.params["dense.w"], self.params["dense.b"])
        out = activation(reshape(out, (B, 3, H, W)), "tanh")
        return channels(out, 0, 1), channels(out, 1, 2), channels(out, 2, 3)


def predict_stack(model: Model, x: Tensor) -> Tensor:
    """Forward pass returning ``(B, 3, H, W)`` with channels ``u, v, A``."""
    u, v, a = model(x)
    return concat([u, v, a], axis=1)


# --------------------------------------------------------------------------
# checkpoint file: "HSUN" | u32 version | u32 len + spec/meta text | u32 n |
# n x (u32 len + name, u32 ndim, ndim x u32 dims, f64 LE data)

MAGIC = b"HSUN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def serialize(spec: ModelSpec, arrays: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    text = spec.to_text() + "".join(f"meta.{k}={v}\n" for k, v in (meta or {}).items())
    raw = text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def deserialize(blob: bytes) -> tuple[ModelSpec, dict[str, np.ndarray], dict[str, str]]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"checkpoint truncated at byte {pos} (need {n} more)")
        out = view[pos : pos + n]
        pos += n
        return out

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    text = bytes(take(u32())).decode("utf-8")
    values: dict[str, str] = {}
    meta: dict[str, str] = {}
    for line in text.splitlines():
        k, _, v = line.partition("=")
        if k.startswith("meta."):
            meta[k[5:]] = v
        else:
            values[k] = v
    spec = ModelSpec.from_mapping(values)
    arrays: dict[str, np.ndarray] = {}
    for _ in range(u32()):
        name = bytes(take(u32())).decode("utf-8")
        ndim = u32()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after checkpoint body")
    return spec, arrays, meta


def save_checkpoint(path: str | Path, model: Model, meta: dict[str, str] | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    arrays = model.state_arrays()
    if extra:
        arrays.update(extra)
    Path(path).write_bytes(serialize(model.spec, arrays, meta))


def load_checkpoint(path: str | Path, dtype=np.float64) -> tuple[Model, dict[str, str], dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint.

    Returns the model, the metadata map and any non-parameter arrays
    (optimizer moments, best-so-far weights) stored alongside.
    """
    spec, arrays, meta = deserialize(Path(path).read_bytes())
    model = Model(spec)
    own = {k: v for k, v in arrays.items() if k in model.params}
    extra = {k: v for k, v in arrays.items() if k not in model.params}
    model.load_arrays(own)
    model.astype(dtype)
    return model, meta, extra

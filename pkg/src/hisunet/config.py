"""Flat key=value run configuration.

Precedence: command-line flags > config file > defaults. Unknown keys are
errors, so a typo never silently falls back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .data import NormSpec
from .models import ModelSpec
from .synth import WorldConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    type: type
    default: Any
    help: str


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_NORM_DEFAULTS = NormSpec().bounds

KEYS: dict[str, Key] = {
    # paths
    "input": Key(str, "", "input SIGD stack"),
    "output": Key(str, "", "output file or directory"),
    "checkpoint": Key(str, "", "model checkpoint (.hsun)"),
    "resume": Key(str, "", "training state to resume from (directory or state.hsun)"),
    "region_mask": Key(str, "synthetic", "SIGD file with a 'region' variable, or 'synthetic'"),
    # model
    "model": Key(str, "his_unet", "his_unet|eb_unet|lb_unet|unet|fcn7|cnn_dense|persistence|linreg"),
    "stem_channels": Key(int, 32, "filters of the first convolution"),
    "depth": Key(int, 3, "pooling levels of the U-nets"),
    "activation": Key(str, "tanh", "hidden activation"),
    # training
    "epochs": Key(int, 100, "epochs to run in this invocation"),
    "lr": Key(float, 1e-3, "Adam learning rate"),
    "beta": Key(float, 0.5, "SIC weight in the loss"),
    "batch_size": Key(int, 4, "samples per batch"),
    "seed": Key(int, 0, "seed for world generation, init, split and shuffling"),
    "precision": Key(str, "float32", "float32|float64 for training"),
    "checkpoint_every": Key(int, 1, "epochs between state saves"),
    "split_ratio": Key(float, 0.8, "training fraction"),
    "buffer_px": Key(int, 2, "coastal buffer in pixels"),
    "eval_split": Key(str, "val", "val|train|all samples to evaluate"),
    "append": Key(_bool, False, "append to an existing metrics table"),
    # gradient checks
    "gc_seeds": Key(int, 5, "random seeds per check"),
    "gc_eps": Key(float, 1e-5, "finite-difference step"),
    "gc_tol": Key(float, 1e-4, "max relative error"),
}
for _grp in ("siv", "sic", "t2m", "wind", "coord_x", "coord_y"):
    _b = _NORM_DEFAULTS[_grp]
    KEYS[f"norm_{_grp}_min"] = Key(str, "auto" if _b is None else repr(_b[0]), f"lower {_grp} bound")
    KEYS[f"norm_{_grp}_max"] = Key(str, "auto" if _b is None else repr(_b[1]), f"upper {_grp} bound")
for _name, _typ in WorldConfig.keys().items():
    if _name != "seed":
        KEYS[_name] = Key(_typ, getattr(WorldConfig(), _name), f"world: {_name}")


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in KEYS:
            raise ConfigError(f"{source}:{n}: unknown key {k!r}")
        out[k] = v
    return out


def load_file(path: str | Path) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_text(p.read_text(), str(p))


class RunConfig(dict):
    """Resolved, typed configuration values keyed by name."""

    @classmethod
    def resolve(cls, file_values: dict[str, str] | None = None, flags: dict[str, Any] | None = None) -> "RunConfig":
        cfg = cls({k: spec.default for k, spec in KEYS.items()})
        for layer in (file_values or {}, flags or {}):
            for k, v in layer.items():
                if v is None:
                    continue
                if k not in KEYS:
                    raise ConfigError(f"unknown key {k!r}")
                try:
                    cfg[k] = KEYS[k].type(v) if isinstance(v, str) else v
                except ValueError as exc:
                    raise ConfigError(f"bad value for {k}: {exc}") from None
        return cfg

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.items())

    def world(self) -> WorldConfig:
        kw = {k: self[k] for k in WorldConfig.keys() if k != "seed"}
        return WorldConfig(seed=self["seed"], **kw)

    def train(self) -> TrainConfig:
        return TrainConfig(
            epochs=self["epochs"],
            lr=self["lr"],
            beta=self["beta"],
            batch_size=self["batch_size"],
            seed=self["seed"],
            precision=self["precision"],
            checkpoint_every=self["checkpoint_every"],
        )

    def model_spec(self, height: int, width: int) -> ModelSpec:
        return ModelSpec(
            kind=self["model"],
            stem_channels=self["stem_channels"],
            depth=self["depth"],
            activation=self["activation"],
            height=height,
            width=width,
            seed=self["seed"],
        )

    def norm(self) -> NormSpec:
        bounds = {}
        for grp in ("siv", "sic", "t2m", "wind", "coord_x", "coord_y"):
            lo, hi = self[f"norm_{grp}_min"], self[f"norm_{grp}_max"]
            if "auto" in (lo, hi):
                if lo != hi:
                    raise ConfigError(f"norm_{grp}_min/max must both be numbers or both 'auto'")
                bounds[grp] = None
            else:
                try:
                    bounds[grp] = (float(lo), float(hi))
                except ValueError:
                    raise ConfigError(f"norm_{grp} bounds must be numbers, got {lo!r}, {hi!r}") from None
        try:
            return NormSpec(bounds)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)

"""Command-line entry point: generate | train | evaluate | gradcheck | wam-export.

Every flag mirrors a config key (``--n-days`` and ``--n_days`` both set
``n_days``). Failures print one line ``hisunet: error kind=<kind> msg="..."``
to stderr and exit with the code listed in :data:`EXIT_CODES`.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import LinearRegression, Persistence
from .checks import main as gradcheck_main
from .config import KEYS, ConfigError, RunConfig, load_file
from .data import build_samples, pad_samples, split_dataset
from .evaluation import NeuralPredictor, evaluate, export_wam_maps, synthetic_regions, write_metrics, write_wam_maps
from .models import NEURAL_KINDS, CNN_DENSE_STAGES, CheckpointError, Model, load_checkpoint
from .sigd import SigdError, read_stack, write_stack
from .synth import CFLError, gen_world
from .tensor import ShapeError
from .training import TrainingDiverged, load_train_state, train

log = logging.getLogger("hisunet")

EXIT_CODES = {
    "internal": 1,
    "config": 2,
    "missing_file": 3,
    "spatial_size": 4,
    "bad_data": 5,
    "diverged": 6,
    "gradcheck_failed": 7,
    "cfl": 8,
}

DEFAULT_OUTPUT = {
    "generate": "world.sigd",
    "train": "run",
    "evaluate": "metrics.tsv",
    "gradcheck": "gradcheck.txt",
    "wam-export": "wam_maps",
}
DIR_OUTPUT = ("train", "wam-export")


class CliError(Exception):
    def __init__(self, kind: str, msg: str):
        super().__init__(msg)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("config", message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value file; flags override it")
    for key, spec in KEYS.items():
        names = [f"--{key}"]
        if "_" in key:
            names.append(f"--{key.replace('_', '-')}")
        common.add_argument(*names, dest=key, default=None, metavar=spec.type.__name__.upper().lstrip("_"),
                            help=f"{spec.help} (default: {spec.default})")
    parser = _Parser(prog="hisunet", description="Sea ice forecasting with two-branch attention U-nets.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (
        ("generate", "write a synthetic world as a SIGD stack"),
        ("train", "train a neural model on a SIGD stack"),
        ("evaluate", "metrics table for a model (neural checkpoint, persistence or linreg)"),
        ("gradcheck", "finite-difference check of every differentiable op"),
        ("wam-export", "export WAM weight maps from an his_unet checkpoint"),
    ):
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    file_values = load_file(args.config) if args.config else {}
    flags = {k: getattr(args, k) for k in KEYS}
    cfg = RunConfig.resolve(file_values, flags)
    if not cfg["output"]:
        cfg["output"] = DEFAULT_OUTPUT[args.command]
    return cfg


def _sidecar(command: str, cfg: RunConfig) -> Path:
    out = Path(cfg["output"])
    if command in DIR_OUTPUT:
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{command}.config"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        path = out.with_name(out.name + ".config")
    path.write_text(f"# hisunet {command}\n" + cfg.to_text())
    return path


def _require(path: str, what: str) -> Path:
    if not path:
        raise CliError("config", f"{what} path is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _samples(cfg: RunConfig):
    stack = read_stack(_require(cfg["input"], "input"))
    norm = cfg.norm().resolved(stack)
    samples = build_samples(stack, norm, cfg["buffer_px"])
    if len(samples) < 2:
        raise CliError("bad_data", f"only {len(samples)} complete sample windows in {cfg['input']}")
    train_set, val_set = split_dataset(samples, cfg["split_ratio"], cfg["seed"])
    return stack, norm, samples, train_set, val_set


def cmd_generate(cfg: RunConfig) -> int:
    stack = gen_world(cfg.world())
    write_stack(cfg["output"], stack)
    print(f"wrote {cfg['output']} ({stack.n_days} days, {stack.shape[0]}x{stack.shape[1]})")
    return 0


def _padded(n: int) -> int:
    m = 2**CNN_DENSE_STAGES
    return -(-n // m) * m


def cmd_train(cfg: RunConfig) -> int:
    if cfg["model"] not in NEURAL_KINDS:
        raise CliError("config", f"model {cfg['model']!r} is not trainable; use evaluate")
    stack, _, _, train_set, val_set = _samples(cfg)
    H, W = stack.shape
    if cfg["resume"]:
        model, state = load_train_state(_require(cfg["resume"], "resume state"))
        if model.spec.kind != cfg["model"]:
            raise CliError("config", f"resume state holds {model.spec.kind!r}, config says {cfg['model']!r}")
    else:
        state = None
        if cfg["model"] == "cnn_dense":
            spec = cfg.model_spec(_padded(H), _padded(W))
        else:
            spec = cfg.model_spec(H, W)
        spec.check_input(spec.height, spec.width)
        model = Model(spec)
    spec = model.spec
    if spec.kind == "cnn_dense":
        train_set = pad_samples(train_set, 2**CNN_DENSE_STAGES)
        val_set = pad_samples(val_set, 2**CNN_DENSE_STAGES)
    if (spec.height, spec.width) != train_set[0].mask.shape:
        raise ShapeError(f"model grid {spec.height}x{spec.width} does not match data {H}x{W}")
    log.info("training %s: %d parameters, %d train / %d val samples",
             spec.kind, model.n_parameters(), len(train_set), len(val_set))
    state = train(model, train_set, val_set, cfg.train(), state=state, out_dir=cfg["output"])
    last = state.history[-1]
    print(f"epoch {last.epoch} train_loss {last.train_loss:.6g} val_loss {last.val_loss:.6g} -> {cfg['output']}")
    return 0


def _region_mask(cfg: RunConfig, stack) -> np.ndarray:
    if cfg["region_mask"] == "synthetic":
        return synthetic_regions(*stack.shape, stack.var("land")[0])
    regions = read_stack(_require(cfg["region_mask"], "region mask"))
    if regions.shape != stack.shape:
        raise ShapeError(f"region mask {regions.shape} does not match data {stack.shape}")
    return np.nan_to_num(regions.var("region")[0]).astype(np.int64)


def cmd_evaluate(cfg: RunConfig) -> int:
    stack, norm, samples, train_set, val_set = _samples(cfg)
    chosen = {"val": val_set, "train": train_set, "all": samples}.get(cfg["eval_split"])
    if chosen is None:
        raise CliError("config", f"eval_split must be val, train or all, got {cfg['eval_split']!r}")
    kind = cfg["model"]
    if kind == "persistence":
        predictor = Persistence()
    elif kind == "linreg":
        predictor = LinearRegression().fit(train_set)
    else:
        model = load_checkpoint(_require(cfg["checkpoint"], "checkpoint"))[0]
        spec = model.spec
        H, W = stack.shape
        if spec.kind == "cnn_dense":
            if H > spec.height or W > spec.width:
                raise ShapeError(f"data {H}x{W} exceeds cnn_dense grid {spec.height}x{spec.width}")
        elif spec.kind == "his_unet" and (H, W) != (spec.height, spec.width):
            raise ShapeError(f"his_unet weight grids are {spec.height}x{spec.width}, data is {H}x{W}")
        else:
            spec.check_input(H, W)
        predictor = NeuralPredictor(model, cfg["batch_size"])
        kind = spec.kind
    try:
        records = evaluate(predictor, chosen, norm, _region_mask(cfg, stack), model_id=kind)
    except ValueError as exc:
        raise CliError("bad_data", str(exc)) from None
    write_metrics(cfg["output"], records, append=cfg["append"])
    for r in records:
        if r.scope == "overall":
            print(f"{kind} {r.variable} R={r.R:.4f} RMSE={r.RMSE:.4f} MAE={r.MAE:.4f} n={r.n_pixels}")
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    ok, text = gradcheck_main(cfg["gc_seeds"], cfg["gc_eps"], cfg["gc_tol"])
    Path(cfg["output"]).write_text(text + "\n")
    print(text.splitlines()[-1])
    if not ok:
        raise CliError("gradcheck_failed", text.splitlines()[-1])
    return 0


def cmd_wam_export(cfg: RunConfig) -> int:
    maps = export_wam_maps(_require(cfg["checkpoint"], "checkpoint"))
    for p in write_wam_maps(cfg["output"], maps):
        print(f"wrote {p}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "wam-export": cmd_wam_export,
}


def _fail(kind: str, msg: str) -> int:
    text = " ".join(str(msg).split()).replace('"', "'")
    print(f'hisunet: error kind={kind} msg="{text}"', file=sys.stderr)
    return EXIT_CODES[kind]


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        cfg = _resolve(args)
        # validate the derived configs before touching any file
        cfg.norm()
        if args.command == "generate":
            cfg.world()
        if args.command == "train":
            cfg.train()
        _sidecar(args.command, cfg)
        return COMMANDS[args.command](cfg)
    except CliError as exc:
        return _fail(exc.kind, str(exc))
    except ConfigError as exc:
        return _fail("config", str(exc))
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc))
    except ShapeError as exc:
        return _fail("spatial_size", str(exc))
    except CFLError as exc:
        return _fail("cfl", str(exc))
    except TrainingDiverged as exc:
        return _fail("diverged", str(exc))
    except (SigdError, CheckpointError) as exc:
        return _fail("bad_data", str(exc))
    except ValueError as exc:
        return _fail("config", str(exc))


if __name__ == "__main__":
    sys.exit(main())

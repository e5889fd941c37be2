"""Train and evaluate every model on one synthetic world; print a ranked table.

    python3 scripts/compare.py --dir runs/compare [--epochs 20] [--seed 0]

Reuses ``<dir>/world.sigd`` and finished ``<dir>/<model>/model.hsun`` files,
so an interrupted comparison picks up where it stopped.
"""

import argparse
import sys
from pathlib import Path

from hisunet.cli import main as cli
from hisunet.evaluation import read_metrics

NEURAL = ("his_unet", "eb_unet", "lb_unet", "unet", "fcn7", "cnn_dense")


def run(argv: list[str]) -> None:
    code = cli([str(a) for a in argv])
    if code != 0:
        sys.exit(code)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dir", default="runs/compare")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    d = Path(args.dir)
    d.mkdir(parents=True, exist_ok=True)
    world, table = d / "world.sigd", d / "compare.tsv"
    seed = ["--seed", args.seed]
    if not world.exists():
        run(["generate", "--height", 48, "--width", 48, "--n-days", 250, *seed, "--output", world])
    table.unlink(missing_ok=True)
    for kind in ("persistence", "linreg"):
        run(["evaluate", "--input", world, "--model", kind, *seed, "--output", table, "--append", "true"])
    for kind in NEURAL:
        ckpt = d / kind / "model.hsun"
        if not ckpt.exists():
            run(["train", "--input", world, "--model", kind, "--epochs", args.epochs, *seed, "--output", d / kind])
        run(["evaluate", "--input", world, "--checkpoint", ckpt, *seed, "--output", table, "--append", "true"])

    rows = [r for r in read_metrics(table) if r.scope == "overall"]
    by = {}
    for r in rows:
        by.setdefault(r.model, {})[r.variable] = r
    print(f"\nseed {args.seed}, {args.epochs} epochs, validation split")
    print("| model | SIC R | SIC RMSE % | SIC MAE % | SIV R | SIV RMSE km/day | SIV MAE km/day |")
    print("|---|---|---|---|---|---|---|")
    for m in sorted(by, key=lambda k: by[k]["SIC"].RMSE):
        a, v = by[m]["SIC"], by[m]["SIV"]
        print(f"| {m} | {a.R:.4f} | {a.RMSE:.3f} | {a.MAE:.3f} | {v.R:.4f} | {v.RMSE:.3f} | {v.MAE:.3f} |")


if __name__ == "__main__":
    main()

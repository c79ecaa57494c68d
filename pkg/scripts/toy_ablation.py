"""Train full / no_kra / no_kda on every synthetic category and print a CD table.

    python3 scripts/toy_ablation.py --out runs/toy
"""
import argparse
import dataclasses
import json
from pathlib import Path

from ktnet.experiments import VARIANTS, category_mean, run_suite, toy_dataset
from ktnet.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--count", type=int, default=30, help="instances per category")
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--gamma", type=float, default=1e-4)
    ap.add_argument("--variants", default=",".join(VARIANTS))
    args = ap.parse_args()

    ds = toy_dataset(seed=args.seed, count=args.count)
    config = TrainConfig(seed=args.seed, epochs=args.epochs, gamma=args.gamma)
    variants = tuple(args.variants.split(","))

    def show(r):
        print(f"{r.category:6s} {r.variant:7s} init {r.initial_cd:.4f} final {r.final_cd:.4f} "
              f"identity {r.identity_cd:.4f} |enh-teacher| {r.d_enhanced:.3f} |raw-teacher| {r.d_raw:.3f} "
              f"({r.seconds:.0f}s)", flush=True)

    runs = run_suite(ds, args.out, variants=variants, config=config, progress=show)
    print("\nmean final CD x 1e4 over categories")
    for v in variants:
        print(f"  {v:7s} {1e4 * category_mean(runs, v, 'final_cd'):8.1f}")
    summary = [{k: str(v) if isinstance(v, Path) else v for k, v in dataclasses.asdict(r).items()} for r in runs]
    Path(args.out, "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()

"""Command-line entry point: gen-data, train, infer, eval, dump-features.

Exit codes: 0 success, 2 usage error (bad flags or config values),
1 runtime error (missing files, parse failures, checkpoint mismatch, ...).
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import metrics as M
from .checkpoint import CheckpointError
from .pointcloud import (
    CATEGORIES, PointCloud, Role, build_dataset, load, load_dataset, save, write_dataset,
)
from .tensor import ConfigError
from .trainer import (
    ABLATIONS, PRESETS, dump_features, fit, load_config, model_from_checkpoint, write_features_csv,
)

CLOUD_SUFFIXES = (".xyz", ".ply")


class UsageError(Exception):
    pass


def _fraction(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie strictly between 0 and 1, got {v}")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _manifest_path(data: str) -> Path:
    p = Path(data)
    return p / "manifest.json" if p.is_dir() else p


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    cats = _csv_list(args.categories)
    bad = [c for c in cats if c not in CATEGORIES]
    if bad or not cats:
        raise UsageError(f"--categories: unknown {bad}; choose from {','.join(CATEGORIES)}")
    if args.count < 3:
        raise UsageError(f"--count must be >= 3 to split three ways, got {args.count}")
    ds = build_dataset(cats, counts=args.count, seed=args.seed, n_points=args.points,
                       keep_fraction=args.keep_fraction)
    meta = {"categories": cats, "count": args.count, "keep_fraction": args.keep_fraction,
            "points": args.points, "seed": args.seed}
    path = write_dataset(ds, args.out, meta)
    print(f"wrote {len(ds.complete_train)} complete, {len(ds.partial_train)} partial, "
          f"{len(ds.paired_test)} test pairs -> {path}")
    return 0


def _train_config(args):
    overrides = {
        "epochs": args.epochs, "batch_size": args.batch_size, "gamma": args.gamma, "seed": args.seed,
        "lambda_g": args.lambda_g, "lambda_p": args.lambda_p, "emd_mode": args.emd_mode,
        "checkpoint_every": args.checkpoint_every, "n_out": args.n_out,
    }
    if args.ablation:
        overrides["ablation"] = sorted(set(args.ablation))
    return load_config(args.config, args.preset, **overrides)


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    try:
        config = _train_config(args)
    except ConfigError as e:
        raise UsageError(str(e)) from None
    manifest = _manifest_path(args.data)
    ds = load_dataset(manifest)
    available = ds.categories()
    if args.category not in available:
        raise ValueError(f"category {args.category!r} not in dataset; available: {', '.join(available)}")
    sub = ds.for_category(args.category)
    out = Path(args.out)

    def progress(step, losses):
        if args.verbose and step % 10 == 0:
            print(f"step {step}: " + " ".join(f"{k}={v:.5g}" for k, v in losses._asdict().items()),
                  file=sys.stderr)

    t1 = time.perf_counter()
    result = fit(sub, config, out, resume=args.resume, progress=progress)
    t2 = time.perf_counter()
    checkpoints = sorted(str(p) for p in (out / "checkpoints").glob("*.ckpt")) + [str(result.checkpoint)]
    run = {
        "command": "train",
        "category": args.category,
        "config": config.to_dict(),
        "seed": config.seed,
        "dataset_manifest": str(manifest),
        "resumed_from": str(args.resume) if args.resume else None,
        "checkpoints": checkpoints,
        "loss_log": str(result.log_path),
        "metric_reports": {"initial": str(out / "metrics_initial.csv"), "final": str(out / "metrics.csv")},
        "test_cd": {"initial": result.initial_cd, "final": result.final_cd},
        "timings": {"load_s": t1 - t0, "train_s": t2 - t1, "total_s": time.perf_counter() - t0},
    }
    _write_json(out / "run_manifest.json", run)
    print(f"{args.category}: test CD {result.initial_cd * 1e4:.2f} -> {result.final_cd * 1e4:.2f} (x1e4); "
          f"checkpoint {result.checkpoint}")
    return 0


def _cloud_files(path: Path) -> list[Path]:
    return sorted(p for p in path.iterdir() if p.suffix in CLOUD_SUFFIXES)


def cmd_infer(args) -> int:
    model, header = model_from_checkpoint(args.checkpoint)
    src, dst = Path(args.input), Path(args.out)
    if src.is_dir():
        inputs = _cloud_files(src)
        if not inputs:
            raise ValueError(f"no .xyz/.ply clouds in {src}")
        dst.mkdir(parents=True, exist_ok=True)
        targets = [dst / (p.stem + "." + args.format) for p in inputs]
    else:
        inputs, targets = [src], [dst]
        dst.parent.mkdir(parents=True, exist_ok=True)
    clouds = [load(p) for p in inputs]
    preds = model.complete([c.points for c in clouds])
    for cloud, pred, target in zip(clouds, preds, targets):
        category = cloud.category if cloud.category != "unknown" else header.get("category", "unknown")
        out = PointCloud(pred, category, Role.PREDICTED, cloud.instance_id)
        save(out, target, args.format, sidecar=True)
    print(f"completed {len(inputs)} cloud(s) -> {dst}")
    return 0


def _index_dir(path: Path) -> dict[str, Path]:
    files = {}
    for p in _cloud_files(path):
        if p.stem in files:
            raise ValueError(f"{path}: two clouds share the name {p.stem!r}")
        files[p.stem] = p
    return files


def cmd_eval(args) -> int:
    wanted = _csv_list(args.metrics)
    unknown = [m for m in wanted if m not in M.METRIC_SCALES]
    if unknown or not wanted:
        raise UsageError(f"--metrics: unknown {unknown}; choose from {','.join(M.METRIC_SCALES)}")
    paired = [m for m in wanted if m in ("cd", "emd")]
    if paired and not args.gt_dir:
        raise UsageError(f"--gt-dir is required for {','.join(paired)}")
    if not args.gt_dir and not args.input_dir:
        raise UsageError("give --gt-dir and/or --input-dir")
    preds = _index_dir(Path(args.pred_dir))
    refs = {"gt": _index_dir(Path(args.gt_dir)) if args.gt_dir else None,
            "input": _index_dir(Path(args.input_dir)) if args.input_dir else None}
    orphans = []
    for label, files in refs.items():
        if files is None:
            continue
        orphans += [f"{label}:{s}" for s in sorted(set(files) - set(preds))]
        orphans += [f"pred:{s} (no {label})" for s in sorted(set(preds) - set(files))]
    if orphans:
        raise ValueError("unmatched files: " + ", ".join(orphans))
    report = M.MetricReport(tuple(wanted))
    for stem in sorted(preds):
        pred = load(preds[stem])
        gt = load(refs["gt"][stem]) if refs["gt"] else None
        source = load(refs["input"][stem]) if refs["input"] else None
        category = next((c.category for c in (gt, source, pred) if c is not None and c.category != "unknown"),
                        "unknown")
        report.add(category, **M.evaluate_pair(wanted, pred, gt, source, emd_mode=args.emd_mode))
    text = report.to_csv(args.out)
    print(text, end="")
    return 0


def cmd_dump_features(args) -> int:
    model, header = model_from_checkpoint(args.checkpoint)
    ds = load_dataset(_manifest_path(args.data))
    category = args.category or header.get("category")
    if category is not None:
        if category not in ds.categories():
            raise ValueError(f"category {category!r} not in dataset; available: {', '.join(ds.categories())}")
        ds = ds.for_category(category)
    clouds = []
    if args.split in ("train", "all"):
        clouds += ds.complete_train + ds.partial_train
    if args.split in ("test", "all"):
        clouds += [c for pair in ds.paired_test for c in pair]
    rows = dump_features(model, clouds)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_features_csv(rows, args.out)
    print(f"wrote {len(rows)} feature rows for {len(clouds)} clouds -> {args.out}")
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ktnet", description="Unpaired point-cloud completion by knowledge transfer.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic unpaired dataset")
    g.add_argument("--categories", default=",".join(CATEGORIES))
    g.add_argument("--count", type=_positive_int, default=30, help="instances per category")
    g.add_argument("--keep-fraction", type=_fraction, default=0.5)
    g.add_argument("--points", type=_positive_int, default=256)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one category")
    t.add_argument("--data", required=True, help="dataset directory or manifest.json")
    t.add_argument("--category", required=True)
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--out", required=True)
    t.add_argument("--ablation", action="append", choices=sorted(ABLATIONS))
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--gamma", type=float)
    t.add_argument("--lambda-g", type=float)
    t.add_argument("--lambda-p", type=float)
    t.add_argument("--emd-mode", choices=["exact", "approx"])
    t.add_argument("--n-out", type=_positive_int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="complete partial clouds with a trained checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--in", dest="input", required=True, help="cloud file or directory of clouds")
    i.add_argument("--out", required=True)
    i.add_argument("--format", choices=["xyz", "ply"], default="xyz")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth and/or inputs")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--gt-dir")
    e.add_argument("--input-dir")
    e.add_argument("--metrics", default="cd")
    e.add_argument("--emd-mode", choices=["exact", "approx"], default="exact")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("dump-features", help="export per-stage latent features as CSV")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--category", help="defaults to the checkpoint's category")
    d.add_argument("--split", choices=["test", "train", "all"], default="test")
    d.set_defaults(func=cmd_dump_features)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"ktnet {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError, CheckpointError) as e:
        print(f"ktnet {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

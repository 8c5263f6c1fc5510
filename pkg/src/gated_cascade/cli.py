"""Command-line entry point: ``gated-cascade <command> [options]``."""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import evalkit
from .cascade import (
    TrainingError,
    cascade_predict,
    model_parameter_count,
    stage_parameter_count,
    train_cascade,
)
from .config import ConfigError, RunConfig
from .data_io import (
    Dataset,
    atomic_write,
    load_directory,
    load_model,
    load_pgm,
    load_pts,
    normalize_image,
    save_directory,
    save_model,
    save_pts,
    synthetic_split,
)
from .ensemble import Variant

logger = logging.getLogger("gated_cascade")


class CommandError(RuntimeError):
    pass


def _thread_limit():
    value = os.environ.get("GATED_CASCADE_THREADS")
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(value)))


def load_config(args) -> RunConfig:
    base = RunConfig.full() if getattr(args, "preset", "desk") == "full" else RunConfig()
    cfg = RunConfig.from_file(args.config, base) if getattr(args, "config", None) else base
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = value
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    return RunConfig.from_mapping(overrides, cfg) if overrides else cfg.validated()


def dataset_for(cfg: RunConfig, split: str, data_dir: str | None = None) -> Dataset:
    if data_dir:
        return load_directory(data_dir)
    if cfg.dataset == "synthetic":
        return synthetic_split(cfg, split)
    if not cfg.dataset:
        raise CommandError("no dataset configured; set dataset = synthetic or a directory of .pgm/.pts pairs")
    root = Path(cfg.dataset)
    return load_directory(root / split if (root / split).is_dir() else root)


def _write_text(path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


def _print_counts(cfg: RunConfig) -> None:
    counts = stage_parameter_count(cfg)
    print(f"variant={cfg.variant} stages={cfg.stages} concat_dim={cfg.concat_dim} fc_dim={cfg.fc_dim}")
    print(
        f"per-stage parameters: conv={counts['conv']} fc={counts['fc']} regression={counts['regression']}"
    )
    print(f"total parameters: {model_parameter_count(cfg)}")


# commands ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args)
    _print_counts(cfg)
    if args.dry_run:
        return 0
    out = Path(args.out)
    if out.exists() and not args.force:
        raise CommandError(f"{out} exists; pass --force to overwrite")
    data = dataset_for(cfg, "train", args.data)
    model, results = train_cascade(cfg, data.images, data.shapes, log=logger.info)
    save_model(model, out)
    rows = []
    for k, r in enumerate(results):
        rows.append((k + 1, 0, repr(r.initial_loss)))
        rows += [(k + 1, e + 1, repr(v)) for e, v in enumerate(r.losses)]
    _write_text(str(out) + ".loss.csv", evalkit.csv_text(["stage", "epoch", "loss"], rows))
    print(f"wrote {out}")
    return 0


def _apply_map(preds, map_path):
    if not map_path:
        return preds
    return evalkit.LandmarkMap.load(map_path)(preds)


def cmd_eval(args) -> int:
    if args.oracle:
        if not args.data:
            raise CommandError("--oracle needs --data")
        data = load_directory(args.data)
        preds = data.shapes
        cfg = None
        landmarks = data.shapes.shape[1]
    else:
        if not args.model:
            raise CommandError("eval needs --model (or --oracle)")
        model = load_model(args.model)
        cfg = model.config
        data = dataset_for(cfg, "test", args.data)
        if data.shapes.shape[1] != model.landmarks and not args.map:
            raise CommandError(
                f"dataset has {data.shapes.shape[1]} landmarks but the model predicts {model.landmarks}; "
                "pass --map to convert"
            )
        for st in model.stages:
            st.layer.regressor_evaluations = 0
        pred = cascade_predict(model, data.images, mode="top1" if args.top1 else "full")
        preds = _apply_map(pred.final, args.map)
        landmarks = preds.shape[1]
        per_stage = [st.layer.regressor_evaluations / len(data) for st in model.stages]
        print("regressor evaluations per sample per stage: " + ",".join(f"{v:g}" for v in per_stage))
    normalizer = args.normalizer or (cfg.normalizer if cfg is not None else "auto")
    result = evalkit.evaluate(preds, data.shapes, evalkit.make_normalizer(normalizer, landmarks), data.ids)
    print(f"samples={len(data)} mean_nme={result.mean:.6f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_text(out / "errors.csv", evalkit.errors_csv(result))
        _write_text(out / "ced.csv", evalkit.ced_csv(result))
        _write_text(out / "summary.csv", evalkit.csv_text(["samples", "mean_nme"], [(len(data), repr(result.mean))]))
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    mode = "top1" if args.top1 else "full"
    out_dir = Path(args.out) if args.out else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        image = normalize_image(load_pgm(path))
        report = evalkit.trajectory_report(model, image, mode)
        final = _apply_map(report.shapes[-1], args.map)
        if out_dir is not None:
            save_pts(out_dir / (Path(path).stem + ".pts"), final)
        print(f"{path}: regressors " + ",".join("-" if w is None else str(w) for w in report.winners))
        if args.trajectory:
            for k, s in enumerate(report.shapes):
                print(f"  stage {k}: " + " ".join(f"{x:.2f},{y:.2f}" for x, y in s))
    return 0


def cmd_ablate(args) -> int:
    variants = [v.strip() for v in (args.variants or "").split(",") if v.strip()]
    if not variants:
        raise ConfigError("variants: at least one variant is required")
    base = load_config(args)
    header = ["variant", "split", "mean_nme", "regression_params", "total_params"]
    if args.timing:
        header.append("train_seconds")
    rows = []
    test = train = None
    for name in variants:
        cfg = base.replace(variant=name)
        counts = stage_parameter_count(cfg)
        row = [name, "test", "", counts["regression"], model_parameter_count(cfg)]
        seconds = 0.0
        if not args.count_only:
            if train is None:
                train, test = dataset_for(cfg, "train", args.data), dataset_for(cfg, "test", args.test_data)
            start = time.perf_counter()
            model, _ = train_cascade(cfg, train.images, train.shapes, log=logger.info)
            seconds = time.perf_counter() - start
            norm = evalkit.make_normalizer(cfg.normalizer, cfg.landmarks)
            result = evalkit.evaluate(cascade_predict(model, test.images).final, test.shapes, norm)
            row[2] = repr(result.mean)
        if args.timing:
            row.append(f"{seconds:.3f}")
        rows.append(row)
        print(",".join(str(v) for v in row))
    if not args.count_only and test is not None:
        norm = evalkit.make_normalizer(base.normalizer, base.landmarks)
        mean = evalkit.mean_shape_baseline(train.shapes, test.shapes, norm)
        rows.append(["mean-shape", "test", repr(mean), 0, 0] + ([""] if args.timing else []))
    if args.out:
        _write_text(args.out, evalkit.csv_text(header, rows))
    return 0


def cmd_gate_stats(args) -> int:
    model = load_model(args.model)
    if not model.config.variant_enum.gated:
        raise CommandError(f"gate-stats needs a gated model; this model is variant {model.config.variant!r}")
    data = dataset_for(model.config, "test", args.data)
    text = evalkit.gate_stats_csv(evalkit.gate_cumulative(model, data.images))
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_fit_map(args) -> int:
    src_dir, dst_dir = Path(args.src), Path(args.dst)
    stems = sorted(p.stem for p in src_dir.glob("*.pts") if (dst_dir / p.name).exists())
    if not stems:
        raise CommandError(f"no matching .pts names in {src_dir} and {dst_dir}")
    src = np.stack([load_pts(src_dir / f"{s}.pts") for s in stems])
    dst = np.stack([load_pts(dst_dir / f"{s}.pts") for s in stems])
    mapping = evalkit.fit_landmark_map(src, dst, ridge=args.ridge)
    resid = np.linalg.norm(mapping(src) - dst, axis=-1).mean()
    mapping.save(args.out)
    print(f"pairs={len(stems)} {mapping.src_points}->{mapping.dst_points} mean_residual={resid:.6f}")
    return 0


def cmd_synth(args) -> int:
    cfg = load_config(args)
    splits = ["train", "test"] if args.split == "all" else [args.split]
    for split in splits:
        data = synthetic_split(cfg.replace(dataset="synthetic"), split)
        target = Path(args.out) / split if len(splits) > 1 else Path(args.out)
        save_directory(target, data)
        print(f"wrote {len(data)} samples to {target}")
    return 0


# parser -------------------------------------------------------------------------------


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value configuration file")
    p.add_argument("--preset", choices=["desk", "full"], default="desk",
                   help="defaults the configuration file overrides (default: desk)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--variant", choices=[v.value for v in Variant], help="regression layer variant")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any configuration key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gated-cascade", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train every cascade stage and write a model file")
    _config_flags(p)
    p.add_argument("--out", required=True, metavar="PATH", help="model file to write")
    p.add_argument("--data", metavar="DIR", help="training directory (overrides the configured dataset)")
    p.add_argument("--force", action="store_true", help="overwrite an existing model file")
    p.add_argument("--dry-run", action="store_true", help="validate and report parameter counts only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a model (NME, CED)")
    p.add_argument("--model", metavar="PATH")
    p.add_argument("--data", metavar="DIR", help="evaluation directory (default: the model's test split)")
    p.add_argument("--top1", action="store_true", help="greedy inference with the top-gated regressor only")
    p.add_argument("--map", metavar="PATH", help="landmark map applied to predictions before scoring")
    p.add_argument("--oracle", action="store_true", help="score the ground truth against itself")
    p.add_argument("--normalizer", help="pupils68 | pair:i,j | auto")
    p.add_argument("--out", metavar="DIR", help="directory for errors.csv, ced.csv and summary.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="align .pgm images")
    p.add_argument("images", nargs="+", metavar="IMAGE")
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--top1", action="store_true")
    p.add_argument("--map", metavar="PATH")
    p.add_argument("--trajectory", action="store_true", help="print the shape after every stage")
    p.add_argument("--out", metavar="DIR", help="write one .pts per image here")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train and compare regression-layer variants")
    _config_flags(p)
    p.add_argument("--variants", required=True, help="comma-separated list, e.g. sr,re,soft-gre,tree-gre")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--test-data", metavar="DIR")
    p.add_argument("--count-only", action="store_true", help="report parameter counts without training")
    p.add_argument("--timing", action="store_true", help="add a wall-clock train_seconds column")
    p.add_argument("--out", metavar="PATH", help="CSV report")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gate-stats", help="cumulative sorted gate probabilities per stage")
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--out", metavar="PATH")
    p.set_defaults(func=cmd_gate_stats)

    p = sub.add_parser("fit-map", help="fit a linear map between two landmark markups")
    p.add_argument("--src", required=True, metavar="DIR", help=".pts files in the source markup")
    p.add_argument("--dst", required=True, metavar="DIR", help="same-named .pts files in the target markup")
    p.add_argument("--ridge", type=float, default=0.0)
    p.add_argument("--out", required=True, metavar="PATH", help="output .npz")
    p.set_defaults(func=cmd_fit_map)

    p = sub.add_parser("synth", help="write the synthetic dataset as .pgm/.pts pairs")
    _config_flags(p)
    p.add_argument("--split", choices=["train", "test", "all"], default="all")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (CommandError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""``plantdet train|eval|detect|ablate|synth``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 NaN/Inf during
a run, 1 anything else raised by the library.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig, load_config, tomllib
from .data import Dataset, DatasetIndex, SyntheticSceneConfig, generate_synthetic_dataset
from .errors import ConfigError, DataError, PlantDetError
from .model import DetectorModel

log = logging.getLogger("plantdet")

DETECT_CONF = 0.25
DETECT_IOU = 0.45


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="TOML run configuration")
    g.add_argument("--profile", help="named preset applied before --config (default, smoke)")
    g.add_argument("--data", help="dataset directory or manifest.json")
    g.add_argument("--weights", help="checkpoint (.pdet)")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--img-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--conf", type=float, help="confidence threshold")
    g.add_argument("--iou", type=float, help="NMS IoU threshold")
    g.add_argument("--strategy", metavar="C3:ST", help="backbone combination, e.g. 2:2")
    g.add_argument("--out", help="output root (run directories are created inside it)")
    g.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key; VALUE is parsed as TOML (repeatable)")
    g.add_argument("-q", "--quiet", action="store_true", help="only log warnings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plantdet", description="Hybrid CNN/attention plant detector.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train a model and write checkpoints, metrics and plots")
    _common(p)
    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    _common(p)
    p.add_argument("--split", help="train, val, test or all (default from config)")
    p = sub.add_parser("detect", help="run a checkpoint on image files")
    _common(p)
    p.add_argument("images", nargs="+", help="image files (PPM, PNG, JPEG, ...)")
    p.add_argument("--draw", action="store_true", help="also write <stem>_det.ppm with boxes drawn")
    p = sub.add_parser("ablate", help="train and compare an ablation grid")
    _common(p)
    p.add_argument("grid", choices=("attention", "combination"))
    p = sub.add_parser("synth", help="generate a synthetic labelled dataset")
    _common(p)
    p.add_argument("--n", type=int, help="number of images")
    p.add_argument("--classes", type=int, help="number of classes")
    return parser


def _parse_set(items) -> dict:
    out: dict = {}
    for item in items:
        key, sep, raw = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        out.setdefault(section, {})[name] = value
    return out


def overrides_from_args(args) -> dict:
    o = _parse_set(args.set)

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    put("train", "epochs", args.epochs)
    put("train", "batch", args.batch)
    put("train", "img_size", args.img_size)
    put("train", "lr", args.lr)
    put("train", "seed", args.seed)
    put("eval", "conf", args.conf)
    put("eval", "iou", args.iou)
    put("model", "strategy", args.strategy)
    put("data", "path", args.data)
    if args.command == "synth":
        put("synth", "seed", args.seed)
        put("synth", "n_images", args.n)
        put("synth", "classes", args.classes)
        put("synth", "image_size", args.img_size)
    return o


def resolve_config(args, stored: dict | None = None) -> RunConfig:
    base = stored if stored and not args.config and not args.profile else None
    return load_config(args.config, args.profile, overrides_from_args(args), base)


def make_run_dir(root, seed: int) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = Path(root) / f"{stamp}-s{seed}"
    k = 1
    while path.exists():
        path = Path(root) / f"{stamp}-s{seed}-{k}"
        k += 1
    path.mkdir(parents=True)
    return path


def synth_config(cfg: RunConfig) -> SyntheticSceneConfig:
    s = cfg.synth
    return SyntheticSceneConfig(image_size=s.image_size, classes=s.classes, leaves=(s.leaves_min, s.leaves_max),
                                occlusion=s.occlusion, seed=s.seed)


def _dataset_for_run(cfg: RunConfig) -> DatasetIndex | None:
    if cfg.data.path:
        return DatasetIndex.load(cfg.data.path)
    if cfg.profile == "smoke":
        return None  # generated inside the run directory
    raise ConfigError("no dataset given: pass --data or set data.path")


def preflight(cfg: RunConfig, index: DatasetIndex | None) -> None:
    """Build the model once so layout errors surface before anything is written."""
    if index is None:
        synth_config(cfg)
    nc = index.nc if index is not None else cfg.synth.classes
    DetectorModel(cfg.model.backbone(), nc, cfg.model.anchor_set(), cfg.train.seed)


def _materialise_data(cfg: RunConfig, index: DatasetIndex | None, run_dir: Path):
    if index is not None:
        return cfg, index
    index = generate_synthetic_dataset(synth_config(cfg), cfg.synth.n_images, run_dir / "data")
    return cfg.with_updates(data={"path": str(run_dir / "data")}), index


def _check_splits(cfg: RunConfig, index: DatasetIndex | None, splits) -> None:
    if index is None:
        return
    for split in splits:
        if not index.split_indices(split):
            raise DataError(f"split {split!r} of {index.root} is empty")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    from .plots import plot_loss_curves, plot_pr_curves
    from .report import format_report, write_reports
    from .train import evaluate, train

    cfg = resolve_config(args)
    index = _dataset_for_run(cfg)
    _check_splits(cfg, index, (cfg.train.train_split, cfg.train.val_split))
    preflight(cfg, index)
    run_dir = make_run_dir(args.out or "runs", cfg.train.seed)
    cfg, index = _materialise_data(cfg, index, run_dir)
    _write_json(run_dir / "config.json", cfg.to_dict())
    log.info("run directory %s", run_dir)
    result = train(cfg, index, run_dir)
    plot_loss_curves(result.history, run_dir / "loss_curves.png")
    best = load_checkpoint(run_dir / "best.pdet")
    val = Dataset(index, cfg.train.val_split, cfg.train.img_size, cfg.data.resize)
    ev, _ = evaluate(best, val, cfg)
    meta = {"checkpoint": str(run_dir / "best.pdet"), "split": cfg.train.val_split, **result.summary()}
    write_reports(ev, run_dir, "eval", meta, title=f"best checkpoint (epoch {result.best_epoch}) on {val.split}")
    plot_pr_curves(ev, run_dir / "pr_curves.png")
    _write_json(run_dir / "summary.json", result.summary())
    sys.stdout.write(format_report(ev, f"{run_dir}: best epoch {result.best_epoch}, "
                                       f"{result.steps} steps in {result.seconds:.1f}s"))
    return 0


def _load_weights(args) -> DetectorModel:
    if not args.weights:
        raise ConfigError("--weights is required")
    return load_checkpoint(args.weights)


def _stored_config(model: DetectorModel) -> dict | None:
    meta = getattr(model, "checkpoint_meta", None) or {}
    return meta.get("config")


def cmd_eval(args) -> int:
    from .plots import plot_pr_curves
    from .report import format_report, write_reports
    from .train import check_model_data, evaluate

    model = _load_weights(args)
    cfg = resolve_config(args, _stored_config(model))
    if not cfg.data.path:
        raise ConfigError("no dataset given: pass --data")
    index = DatasetIndex.load(cfg.data.path)
    check_model_data(model, index)
    split = args.split or cfg.eval.split
    ds = Dataset(index, split, cfg.train.img_size, cfg.data.resize)
    run_dir = make_run_dir(args.out or "runs", cfg.train.seed)
    ev, _ = evaluate(model, ds, cfg)
    meta = {"checkpoint": str(args.weights), "split": split, "data": cfg.data.path,
            "img_size": cfg.train.img_size}
    write_reports(ev, run_dir, "eval", meta, title=f"{args.weights} on {split}")
    plot_pr_curves(ev, run_dir / "pr_curves.png")
    sys.stdout.write(format_report(ev, f"{args.weights} on {split} ({run_dir})"))
    return 0


def cmd_detect(args) -> int:
    from .detect import run_detect

    model = _load_weights(args)
    cfg = resolve_config(args, _stored_config(model))
    conf = args.conf if args.conf is not None else DETECT_CONF
    iou = args.iou if args.iou is not None else DETECT_IOU
    run_dir = make_run_dir(args.out or "runs", cfg.train.seed)
    results = run_detect(model, args.images, run_dir, cfg.train.img_size, cfg.data.resize, conf, iou,
                         cfg.eval.max_det, args.draw)
    failed = 0
    for r in results:
        if r.error:
            failed += 1
            sys.stdout.write(f"{r.source}: ERROR {r.error}\n")
        else:
            sys.stdout.write(f"{r.source}: {len(r.detections)} detections\n")
    sys.stdout.write(f"results in {run_dir}\n")
    return DataError.exit_code if failed else 0


def cmd_ablate(args) -> int:
    from .ablate import format_table, grid_arms, run_ablation

    cfg = resolve_config(args)
    grid_arms(args.grid)
    index = _dataset_for_run(cfg)
    _check_splits(cfg, index, (cfg.train.train_split, cfg.train.val_split, cfg.eval.split))
    preflight(cfg, index)
    run_dir = make_run_dir(args.out or "runs", cfg.train.seed)
    cfg, index = _materialise_data(cfg, index, run_dir)
    _write_json(run_dir / "config.json", cfg.to_dict())
    rows = run_ablation(cfg, index, args.grid, run_dir)
    sys.stdout.write(format_table(rows, args.grid))
    sys.stdout.write(f"results in {run_dir}\n")
    return 0


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    scfg = synth_config(cfg)
    if cfg.synth.n_images < 1:
        raise ConfigError("--n must be >= 1")
    out = Path(args.out or "synthetic")
    index = generate_synthetic_dataset(scfg, cfg.synth.n_images, out)
    counts = {k: len(v) for k, v in index.splits.items()}
    sys.stdout.write(f"wrote {len(index)} images with {index.nc} classes to {out} (splits {counts})\n")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "detect": cmd_detect, "ablate": cmd_ablate,
            "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", datefmt="%H:%M:%S")
    try:
        # non-finite values are caught and reported by the engine itself
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return COMMANDS[args.command](args)
    except PlantDetError as exc:
        sys.stderr.write(f"plantdet {args.command}: {type(exc).__name__}: {exc}\n")
        return exc.exit_code
    except OSError as exc:
        sys.stderr.write(f"plantdet {args.command}: {exc}\n")
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())

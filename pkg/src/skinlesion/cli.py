"""Command-line entry point: prepare, train, predict, ensemble, evaluate."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .augment import build_oversample_plan
from .config import RunConfig, check_paths, load_config
from .dataset import (
    GROUND_TRUTH_HEADER,
    SampleRecord,
    class_distribution,
    load_ground_truth,
    load_ground_truth_files,
    stratified_split,
    verify_images,
)
from .ensemble import fuse
from .evaluate import write_text_atomic, evaluate_predictions, read_submission, write_report, write_submission
from .exceptions import ConfigError, SkinLesionError
from .model import build_classifier
from .train import format_history, plot_history, predict_records, read_checkpoint, run_training

logger = logging.getLogger("skinlesion")

MANIFEST_DIR = "manifests"


class CommandError(SkinLesionError):
    """A subcommand could not complete; the message is shown to the user."""


def _manifest_paths(cfg: RunConfig):
    d = cfg.output_dir / MANIFEST_DIR
    return d / "train.txt", d / "holdout.txt"


def _train_dir(cfg: RunConfig, backbone: str) -> Path:
    return cfg.output_dir / "train" / backbone


def read_manifest(path) -> list[str]:
    """Image ids, one per line; a CSV with an ``image`` header contributes its first column."""
    path = Path(path)
    if not path.is_file():
        raise CommandError(f"manifest not found: {path}")
    lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if lines and lines[0].split(",")[0] == GROUND_TRUTH_HEADER[0]:
        lines = [ln.split(",")[0].strip() for ln in lines[1:]]
    return lines


def _select(records, ids, source):
    by_id = {r.image_id: r for r in records}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise CommandError(f"{source}: {len(missing)} id(s) not in ground truth, e.g. {missing[:5]}")
    return [by_id[i] for i in ids]


def _load_records(cfg: RunConfig):
    return load_ground_truth_files(cfg.data.ground_truth, cfg.data.image_root, cfg.data.image_extension)


def cmd_prepare(cfg: RunConfig, args) -> int:
    check_paths(cfg)
    records = _load_records(cfg)
    dist = class_distribution(records)
    train, holdout = stratified_split(records, cfg.split.holdout_fraction, cfg.split.seed)
    report = verify_images(records, n_jobs=cfg.runtime.n_jobs)

    out = cfg.output_dir
    write_text_atomic(out / "distribution.csv", dist.as_table())
    train_path, holdout_path = _manifest_paths(cfg)
    write_text_atomic(train_path, "".join(r.image_id + "\n" for r in train))
    write_text_atomic(holdout_path, "".join(r.image_id + "\n" for r in holdout))
    write_text_atomic(out / "verify.txt", report.to_text())

    print(dist.as_table(), end="")
    print(f"train {len(train)} / holdout {len(holdout)} -> {train_path.parent}")
    if report:
        print(f"image verification found {len(report)} problem(s); see {out / 'verify.txt'}", file=sys.stderr)
        for line in report.lines()[:20]:
            print(line, file=sys.stderr)
        return 1
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    check_paths(cfg)
    backbone = args.backbone or cfg.model.backbone
    train_path, holdout_path = _manifest_paths(cfg)
    train_ids, holdout_ids = read_manifest(train_path), read_manifest(holdout_path)
    records = _load_records(cfg)
    train = _select(records, train_ids, train_path)
    holdout = _select(records, holdout_ids, holdout_path)

    import torch

    if cfg.runtime.threads:
        torch.set_num_threads(cfg.runtime.threads)
    plan = build_oversample_plan(class_distribution(train), cfg.oversample.epoch_size, cfg.oversample.balance)
    model = build_classifier(
        backbone,
        init_seed=cfg.model.init_seed,
        hidden_units=cfg.model.hidden_units,
        dtype=getattr(torch, cfg.model.dtype),
    )
    out = _train_dir(cfg, backbone)
    best, history = run_training(
        model,
        train,
        holdout,
        cfg.train,
        cfg.augmentation,
        plan,
        params=cfg.normalization,
        checkpoint_dir=out,
        resume=args.resume,
        n_jobs=cfg.runtime.n_jobs,
    )
    write_text_atomic(out / "history.csv", format_history(history))
    plot_history(history, out, cfg.train.phase1_epochs)
    print(f"best holdout balanced accuracy {best.validation_score:.4f} at epoch {best.epoch}; outputs in {out}")
    return 0


def cmd_predict(cfg: RunConfig, args) -> int:
    check_paths(cfg, need_dataset=False)
    ckpt = read_checkpoint(args.checkpoint)
    ids = read_manifest(args.manifest)
    image_root = Path(args.images) if args.images else (cfg.data.validation_images or cfg.data.image_root)
    if image_root is None:
        raise ConfigError("no image directory: pass --images or set data.image_root", field="data.image_root")
    # Inference records carry a placeholder label; only image_id and path are used.
    records = [SampleRecord.from_class(i, image_root / f"{i}{cfg.data.image_extension}", 0) for i in ids]
    report = verify_images(records, n_jobs=cfg.runtime.n_jobs)
    if report:
        raise CommandError("unreadable input images:\n" + "\n".join(report.lines()))

    model = ckpt.to_model()
    name = args.name or ckpt.descriptor.name
    preds = predict_records(model, records, params=cfg.normalization, batch_size=cfg.train.batch_size, source_name=name)
    out = Path(args.out) if args.out else cfg.output_dir / "predictions" / f"{name}.csv"
    write_submission(preds, out)
    print(f"{len(preds)} predictions -> {out}")
    return 0


def cmd_ensemble(cfg: RunConfig, args) -> int:
    files = args.files or list(cfg.ensemble.members)
    if not files:
        raise CommandError("no prediction files given")
    members = [read_submission(f) for f in files]
    weights = args.weights if args.weights is not None else cfg.ensemble.weights
    fused = fuse(members, weights, args.mode or cfg.ensemble.mode)
    out = Path(args.out) if args.out else cfg.output_dir / "ensemble.csv"
    write_submission(fused, out)
    print(f"{fused.source_name}: {len(fused)} images -> {out}")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    preds = read_submission(args.predictions)
    truth = load_ground_truth(args.truth, ".")
    report = evaluate_predictions(preds, truth)
    out_dir = Path(args.output) if args.output else Path(args.predictions).parent
    json_path, _ = write_report(report, out_dir, stem=Path(args.predictions).stem + ".metrics")
    print(report.to_text(), end="")
    print(f"report -> {json_path}")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "predict": cmd_predict,
    "ensemble": cmd_ensemble,
    "evaluate": cmd_evaluate,
}
# Subcommands that cannot run without a run-config file.
NEEDS_CONFIG = {"prepare", "train", "predict"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run-config file")
    common.add_argument("--seed", type=int, help="override every module seed coherently")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    common.add_argument("--output", help="output directory (overrides output_dir)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="skinlesion", description="Dermoscopy lesion classification pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("prepare", parents=[common], help="distribution table, split manifests, image check")

    p = sub.add_parser("train", parents=[common], help="two-phase fine-tuning of one backbone")
    p.add_argument("--backbone", help="backbone name (default: model.backbone)")
    p.add_argument("--resume", action="store_true", help="continue from last.ckpt in the run directory")

    p = sub.add_parser("predict", parents=[common], help="write a submission file from a checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path, help="image ids, one per line, or a ground-truth CSV")
    p.add_argument("--images", type=Path, help="image directory (default: data.validation_images or data.image_root)")
    p.add_argument("--name", help="source name for the prediction set")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("ensemble", parents=[common], help="fuse submission files")
    p.add_argument("files", nargs="*", type=Path)
    p.add_argument("--weights", type=float, nargs="+")
    p.add_argument("--mode", choices=("mean", "geometric"))
    p.add_argument("--out", type=Path)

    p = sub.add_parser("evaluate", parents=[common], help="score a submission against ground truth")
    p.add_argument("predictions", type=Path)
    p.add_argument("truth", type=Path)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    if args.command in NEEDS_CONFIG and args.config is None:
        parser.error(f"{args.command} requires --config")
    try:
        cfg = load_config(args.config, args.overrides, args.seed, args.output)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SkinLesionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

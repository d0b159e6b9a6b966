"""Command line entry point: ``ie2d gen-data | train | infer | evaluate``.

Exit codes: 0 success, 2 configuration or I/O problem, 3 training aborted on a
non-finite loss, 4 checkpoint/config mismatch, 5 unmatched evaluation files.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, TrainConfig
from .data import (
    SampleBatch,
    check_fold,
    generate_corpus,
    load_corpus,
    load_image,
    load_mask,
    make_loocv_splits,
    write_corpus,
)
from .errors import CheckpointMismatch, ConfigError, IngestionError, TrainingAborted
from .evaluation import EvalReport, binary_dice, emit_report, evaluate_volume, predict_volume, render_overlay
from .plotting import plot_history, plot_report
from .trainer import fit, write_history

log = logging.getLogger("ie2dnet")

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_CHECKPOINT, EXIT_EVAL = 0, 2, 3, 4, 5
SEED_ENV = "IE2D_SEED"


class CliError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    """Everything a training run needs; persisted verbatim as ``config.json``."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str | None = None
    out: str | None = None
    val_volume_id: str | None = None
    same_patient: dict | None = None

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data,
            "out": self.out,
            "val_volume_id": self.val_volume_id,
            "same_patient": self.same_patient,
        }


_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_TOP_KEYS = {"data", "out", "val_volume_id", "same_patient"}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _assign(raw, key, value):
    """Place ``key`` (``section.name`` or a bare field name) into the raw config dict."""
    if "." in key:
        section, name = key.split(".", 1)
        raw.setdefault(section, {})[name] = value
    elif key == "seed":
        raw.setdefault("model", {})["seed"] = value
        raw.setdefault("train", {})["seed"] = value
    elif key in _TOP_KEYS:
        raw[key] = value
    elif key in _MODEL_KEYS:
        raw.setdefault("model", {})[key] = value
    elif key in _TRAIN_KEYS:
        raw.setdefault("train", {})[key] = value
    else:
        raise ConfigError(f"unknown config key {key!r}")


def resolve_run_config(config_file=None, overrides=(), environ=None):
    """Merge defaults < environment seed < config file < flag overrides and validate."""
    environ = os.environ if environ is None else environ
    raw = {}
    if config_file:
        try:
            with open(config_file) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_file}: {exc}") from exc
        unknown = set(raw) - _TOP_KEYS - {"model", "train"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
    for key, value in overrides:
        _assign(raw, key, value)
    if SEED_ENV in environ:
        seed = int(environ[SEED_ENV])
        raw.setdefault("model", {}).setdefault("seed", seed)
        raw.setdefault("train", {}).setdefault("seed", seed)
    try:
        return RunConfig(
            model=ModelConfig.from_dict(raw.get("model", {})),
            train=TrainConfig.from_dict(raw.get("train", {})),
            data=raw.get("data"),
            out=raw.get("out"),
            val_volume_id=raw.get("val_volume_id"),
            same_patient=raw.get("same_patient"),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _save_png(array01, path):
    Image.fromarray(np.round(np.clip(array01, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


# -- gen-data ------------------------------------------------------------------------

def cmd_gen_data(args):
    ModelConfig(input_size=args.size, depth=args.depth)  # size must suit the model
    corpus = generate_corpus(args.volumes, args.slices, args.size, args.contrast, args.seed)
    try:
        n = write_corpus(corpus, args.out)
    except OSError as exc:
        raise CliError(f"cannot write corpus to {args.out}: {exc}") from exc
    fg = np.mean([v.masks.mean() for v in corpus.volumes])
    print(f"wrote {len(corpus.volumes)} volumes x {args.slices} slices ({n} samples) "
          f"of {args.size}x{args.size} to {args.out}")
    print(f"volumes: {', '.join(corpus.volume_ids)}; validation: {corpus.val_volume_id}; "
          f"same patient: {corpus.same_patient}; mean foreground {fg:.1%}")
    return EXIT_OK


# -- train ----------------------------------------------------------------------------

def _train_overrides(args):
    overrides = [(k, _parse_value(v)) for k, v in (s.split("=", 1) for s in args.set or [])]
    for flag in ("epochs", "learning_rate", "batch_size"):
        value = getattr(args, flag)
        if value is not None:
            overrides.append((flag, value))
    if args.seed is not None:
        overrides.append(("seed", args.seed))
    if args.data:
        overrides.append(("data", args.data))
    if args.out:
        overrides.append(("out", args.out))
    return overrides


def _write_overlays(params, volume, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    ie2d, unet = predict_volume(params, volume.images)
    for img, gt, pu, pi, idx in zip(volume.images, volume.masks, unet, ie2d, volume.slice_indices):
        panel = render_overlay(img, gt, pu, pi)
        Image.fromarray(panel).save(os.path.join(out_dir, f"{volume.volume_id}_{idx:03d}.png"))


def run_fold(run, corpus, fold, fold_dir):
    """Train one fold and return its ``(dsc_unet, dsc_ie2d)`` on the test volume."""
    os.makedirs(fold_dir, exist_ok=True)
    train_set = SampleBatch.concat([corpus.volume(v) for v in fold.train_volume_ids])
    val_set = corpus.volume(fold.val_volume_id)
    log.info("fold %s: training on %s (%d slices), validating on %s",
             fold.test_volume_id, ",".join(fold.train_volume_ids), len(train_set), fold.val_volume_id)
    try:
        state, history = fit(train_set, val_set, run.model, run.train)
    except TrainingAborted as exc:
        raise CliError(f"fold {fold.test_volume_id}: training aborted in {exc.loss_name}: {exc}", EXIT_TRAIN) from exc
    best = state.best_params
    save_checkpoint(best, os.path.join(fold_dir, "checkpoint.bin"),
                    extra={"fold": fold.test_volume_id, "best_epoch": state.best_epoch,
                           "best_val_dsc_ie2d": state.best_val_dsc})
    write_history(history, os.path.join(fold_dir, "history.csv"))
    plot_history(history, os.path.join(fold_dir, "history.png"), title=f"fold {fold.test_volume_id}")
    test = corpus.volume(fold.test_volume_id)
    _write_overlays(best, test, os.path.join(fold_dir, "overlays"))
    scores = evaluate_volume(best, test)
    log.info("fold %s: test DSC U-Net %.4f  IE2D %.4f", fold.test_volume_id, *scores)
    return scores


def cmd_train(args):
    run = resolve_run_config(args.config, _train_overrides(args))
    if not run.data or not run.out:
        raise ConfigError("both a data directory and an output directory are required")
    if not args.loocv and not args.fold:
        raise ConfigError("choose --fold VOLUME_ID or --loocv")
    try:
        corpus = load_corpus(run.data, run.model.input_size, run.same_patient, run.val_volume_id)
    except (IngestionError, OSError) as exc:
        raise CliError(f"cannot load corpus from {run.data}: {exc}") from exc
    plan = make_loocv_splits(corpus.volumes, corpus.val_volume_id, corpus.same_patient)
    folds = list(plan.folds) if args.loocv else [check_fold(plan, args.fold)]

    fold_dirs = {f.test_volume_id: os.path.join(run.out, f"fold_{f.test_volume_id}") for f in folds}
    existing = [d for d in fold_dirs.values() if os.path.exists(d)]
    if existing and not args.force:
        raise ConfigError(f"refusing to overwrite {', '.join(existing)} (use --force)")
    os.makedirs(run.out, exist_ok=True)
    effective = run.to_dict()
    effective["same_patient"] = corpus.same_patient
    effective["val_volume_id"] = corpus.val_volume_id
    with open(os.path.join(run.out, "config.json"), "w") as fh:
        json.dump(effective, fh, indent=2, sort_keys=True)

    report = EvalReport()
    for fold in folds:
        report.add(fold.test_volume_id, *run_fold(run, corpus, fold, fold_dirs[fold.test_volume_id]))
    path = emit_report(report, os.path.join(run.out, "report.csv"))
    plot_report(report, os.path.join(run.out, "report.png"))
    for (mean, std), label in zip(report.aggregate(), ("U-Net", "IE2D-Net")):
        print(f"{label}: DSC {mean:.2f} ± {std:.2f}")
    print(f"report written to {path}")
    return EXIT_OK


# -- infer ----------------------------------------------------------------------------

def _input_files(path):
    if os.path.isdir(path):
        files = sorted(os.path.join(path, f) for f in os.listdir(path) if f.lower().endswith(".png"))
        if not files:
            raise CliError(f"no PNG files in {path}")
        return files
    if not os.path.isfile(path):
        raise CliError(f"no such input: {path}")
    return [path]


def _resize_mask(mask, shape):
    if mask.shape == shape:
        return mask
    return np.asarray(Image.fromarray(mask).resize((shape[1], shape[0]), Image.NEAREST))


def cmd_infer(args):
    try:
        params = load_checkpoint(args.checkpoint)
    except CheckpointMismatch as exc:
        raise CliError(str(exc), EXIT_CHECKPOINT) from exc
    except OSError as exc:
        raise CliError(f"cannot read checkpoint: {exc}") from exc
    size = params.config.input_size
    os.makedirs(args.out, exist_ok=True)
    written = 0
    for path in _input_files(args.input):
        try:
            original = load_image(path)
            image = load_image(path, size)
        except IngestionError as exc:
            raise CliError(str(exc)) from exc
        ie2d, unet = predict_volume(params, image[None])
        stem = os.path.splitext(os.path.basename(path))[0]
        for name, pred in (("ie2d", ie2d[0]), ("unet", unet[0])):
            _save_png(_resize_mask(pred, original.shape), os.path.join(args.out, f"{stem}_{name}.png"))
            written += 1
        if args.overlay:
            gt = None
            if args.masks:
                mask_path = os.path.join(args.masks, os.path.basename(path))
                if os.path.isfile(mask_path):
                    gt = load_mask(mask_path, size)
            panel = render_overlay(image, gt, unet[0], ie2d[0])
            Image.fromarray(panel).save(os.path.join(args.out, f"{stem}_overlay.png"))
            written += 1
    print(f"wrote {written} files to {args.out}")
    return EXIT_OK


# -- evaluate -------------------------------------------------------------------------

def _pngs(directory):
    if not os.path.isdir(directory):
        raise CliError(f"not a directory: {directory}")
    return {f for f in os.listdir(directory) if f.lower().endswith(".png")}


def cmd_evaluate(args):
    pred_files, gt_files = _pngs(args.pred), _pngs(args.gt)
    unmatched = sorted(pred_files ^ gt_files)
    if unmatched:
        raise CliError("unmatched files: " + ", ".join(unmatched), EXIT_EVAL)
    if not pred_files:
        raise CliError(f"no PNG files in {args.pred}", EXIT_EVAL)
    report = EvalReport(columns=("dsc",))
    for name in sorted(pred_files):
        try:
            gt = load_mask(os.path.join(args.gt, name))
            pred = load_mask(os.path.join(args.pred, name))
        except IngestionError as exc:
            raise CliError(str(exc)) from exc
        if pred.shape != gt.shape:
            pred = _resize_mask(pred, gt.shape)
        report.add(os.path.splitext(name)[0], binary_dice(pred, gt))
    emit_report(report, args.report)
    plot_report(report, os.path.splitext(args.report)[0] + ".png")
    mean, std = report.aggregate()[0]
    print(f"{len(pred_files)} masks: DSC {mean:.2f} ± {std:.2f}; report written to {args.report}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="ie2d", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic PNG corpus with manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--volumes", type=int, default=7)
    p.add_argument("--slices", type=int, default=12)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--depth", type=int, default=5, help="model depth the size must support")
    p.add_argument("--contrast", type=float, default=0.35)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one fold or the full leave-one-out protocol")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--data", help="corpus directory (images/, masks/, manifest.csv)")
    p.add_argument("--out", help="run output directory")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--fold", help="test volume id of the single fold to train")
    group.add_argument("--loocv", action="store_true", help="train every fold")
    p.add_argument("--force", action="store_true", help="overwrite existing fold directories")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int, help="seed for initialization and data order")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field, e.g. kernel_size=3 or train.loss_kind=\"cross-entropy\"")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment images with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="PNG file or directory of PNGs")
    p.add_argument("--out", required=True)
    p.add_argument("--overlay", action="store_true", help="also write color overlay panels")
    p.add_argument("--masks", help="ground-truth directory used only for the overlay panel")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="Dice report for predicted vs ground-truth mask folders")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointMismatch as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

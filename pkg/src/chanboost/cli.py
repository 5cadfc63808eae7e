"""Command-line entry point: slice, train-detect, train-seg, eval, predict.

Exit codes: 0 success, 2 usage/config/data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import metrics
from .blocks import ConfigurationError
from .data import dataset as ds
from .data.images import AugmentationSpec, load_image, resize_bilinear, resize_nearest, save_image, save_mask
from .data.nifti import NiftiFormatError, read_nifti_volume
from .fileio import atomic_write_bytes
from .models import (
    CheckpointError,
    CovidCbResegConfig,
    SbStmBrNetConfig,
    build_classifier,
    build_segmenter,
    extract_features,
    load_checkpoint,
)
from .tensor import Tensor, no_grad
from .training import HyperParams, TrainingDiverged, TrainingError, evaluate, train

log = logging.getLogger("chanboost")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
IMAGE_SUFFIXES = {".png", ".pgm"}


class UsageError(Exception):
    """Reported on stderr with exit code 2."""


# --------------------------------------------------------------------------
# Run configuration


def _reject_unknown(data: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise UsageError(f"{where}: unknown key(s) {', '.join(unknown)}")


def load_run_config(path: str | None, phase: str) -> dict[str, Any]:
    """Parse a JSON run config into model config, hyperparameters and augmentation."""
    raw: dict[str, Any] = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError(f"{path}: config must be a JSON object")
    _reject_unknown(raw, {"model", "hyperparameters", "augmentation", "retrain_full"}, "config")
    model_cls = SbStmBrNetConfig if phase == "detect" else CovidCbResegConfig
    model_raw = raw.get("model", {})
    hp_raw = raw.get("hyperparameters", {})
    aug_raw = raw.get("augmentation", {})
    for name, section in (("model", model_raw), ("hyperparameters", hp_raw)):
        if not isinstance(section, dict):
            raise UsageError(f"config.{name} must be an object")
    _reject_unknown(hp_raw, {f.name for f in fields(HyperParams)}, "config.hyperparameters")
    try:
        model_cfg = model_cls.from_dict(model_raw)
        if "class_weights" in hp_raw and hp_raw["class_weights"] is not None:
            hp_raw = dict(hp_raw, class_weights=tuple(hp_raw["class_weights"]))
        hp = HyperParams(**hp_raw)
        if aug_raw is None or aug_raw is False:
            aug = None
        else:
            if not isinstance(aug_raw, dict):
                raise UsageError("config.augmentation must be an object, null or false")
            _reject_unknown(aug_raw, {f.name for f in fields(AugmentationSpec)}, "config.augmentation")
            aug = AugmentationSpec(**aug_raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    retrain = raw.get("retrain_full", False)
    if not isinstance(retrain, bool):
        raise UsageError("config.retrain_full must be a boolean")
    return {"model": model_cfg, "hp": hp, "augmentation": aug, "retrain_full": retrain}


# --------------------------------------------------------------------------
# slice


def _volume_files(root: Path) -> list[Path]:
    return sorted(p for p in root.rglob("*") if p.is_file() and (p.name.endswith(".nii") or p.name.endswith(".nii.gz")))


def _stem(p: Path) -> str:
    name = p.name
    for suffix in (".nii.gz", ".nii", ".png", ".pgm"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return p.stem


def _find_mask(mask_dir: Path | None, rel: Path) -> Path | None:
    if mask_dir is None:
        return None
    candidate = mask_dir / rel
    if candidate.exists():
        return candidate
    matches = [p for p in mask_dir.rglob(rel.name)]
    return matches[0] if matches else None


def _collect_volume_records(root: Path, mask_dir: Path | None, threshold: int) -> list[ds.SliceRecord]:
    records = []
    for path in _volume_files(root):
        rel = path.relative_to(root)
        mask_path = _find_mask(mask_dir, rel)
        label = None
        if mask_path is None:
            label = ds.canonical_label(rel.parent.name) if rel.parent.name else None
            if label is None:
                raise UsageError(f"{path}: no mask found and no class directory to take a label from")
        try:
            vol = read_nifti_volume(path, mask_path)
        except (NiftiFormatError, OSError, ValueError) as exc:
            raise UsageError(f"{path}: {exc}") from exc
        records.extend(ds.slice_volume(vol, _stem(path), label, threshold))
    return records


def _collect_image_records(root: Path, mask_dir: Path | None, threshold: int) -> list[ds.SliceRecord]:
    records = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        label = ds.canonical_label(class_dir.name)
        if label is None:
            raise UsageError(f"{class_dir}: directory name is not a known class")
        for path in sorted(p for p in class_dir.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES):
            try:
                image = load_image(path)
            except (OSError, ValueError) as exc:
                raise UsageError(f"{path}: {exc}") from exc
            mask = None
            mp = _find_mask(mask_dir, path.relative_to(root))
            if mp is not None:
                try:
                    mask = ds.load_mask(mp)
                except OSError as exc:
                    raise UsageError(f"{mp}: {exc}") from exc
                if mask.shape != image.shape[:2]:
                    raise UsageError(f"{mp}: mask dimensions differ from {path}")
            rec = ds.SliceRecord(image, mask, label, f"{class_dir.name}-{_stem(path)}", 0)
            records.append(rec)
    return records


def cmd_slice(args) -> int:
    root = Path(args.input)
    if not root.is_dir():
        raise UsageError(f"{root}: input directory not found")
    mask_dir = Path(args.mask_dir) if args.mask_dir else None
    if mask_dir is not None and not mask_dir.is_dir():
        raise UsageError(f"{mask_dir}: mask directory not found")
    if _volume_files(root):
        records = _collect_volume_records(root, mask_dir, args.threshold)
    else:
        records = _collect_image_records(root, mask_dir, args.threshold)
    if not records:
        raise UsageError(f"{root}: no supported volumes or images found")
    size = (args.size, args.size)
    try:
        split = ds.split_dataset(records, args.seed, args.test_fraction, args.val_fraction).assignment()
    except ds.SplitError as exc:
        log.warning("cannot form a grouped split (%s); every record goes to 'train'", exc)
        split = {i: "train" for i in range(len(records))}
    out = Path(args.output)
    entries = []
    for i, rec in enumerate(records):
        rec = ds.resize_record(rec, size)
        name = f"{rec.volume_id}_{rec.slice_index:04d}.png"
        save_image(out / "slices" / name, rec.image)
        entry = {"id": rec.id, "path": f"slices/{name}", "label": rec.label, "split": split[i]}
        if rec.mask is not None:
            save_mask(out / "masks" / name, rec.mask)
            entry["mask_path"] = f"masks/{name}"
        entries.append(entry)
    ds.write_manifest(out / "manifest.jsonl", entries)
    counts = ds.class_counts(e["label"] for e in entries)
    print(json.dumps({"records": len(entries), "classes": counts}, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# train-detect / train-seg


def _load_manifest(path: str) -> list[dict]:
    try:
        return ds.read_manifest(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"manifest {path}: {exc}") from exc


def _records_for_phase(entries: list[dict], phase: str, size) -> list[ds.SliceRecord]:
    if phase == "seg":
        entries = [e for e in entries if e["label"] == ds.COVID and e.get("mask_path")]
    try:
        return ds.load_manifest_records(entries, size, require_mask=(phase == "seg"))
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _run_train(args, phase: str) -> int:
    run = load_run_config(args.config, phase)
    overrides = {k: v for k, v in (("epochs", args.epochs), ("learning_rate", args.lr), ("batch_size", args.batch_size))
                 if v is not None}
    try:
        hp = HyperParams(**{**asdict(run["hp"]), **overrides})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    model_cfg = run["model"]
    entries = _load_manifest(args.manifest)
    if phase == "seg":
        entries = [e for e in entries if e["label"] == ds.COVID and e.get("mask_path")]
    train_e = [e for e in entries if e["split"] == "train"]
    val_e = [e for e in entries if e["split"] == "validation"]
    if not train_e or not val_e:
        raise UsageError("manifest needs records in both the 'train' and 'validation' splits")
    records = _records_for_phase(train_e + val_e, phase, model_cfg.input_size)
    train_idx = list(range(len(train_e)))
    val_idx = list(range(len(train_e), len(records)))
    header = {
        "phase": phase,
        "seed": args.seed,
        "learning_rate": hp.learning_rate,
        "epochs": hp.epochs,
        "batch_size": hp.batch_size,
        "momentum": hp.momentum,
        "loss": "cross-entropy",
        "optimizer": "sgdm",
        "train_records": len(train_idx),
        "validation_records": len(val_idx),
    }
    print(json.dumps(header, sort_keys=True), flush=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    build = build_classifier if phase == "detect" else build_segmenter

    def fit(idx):
        model = build(model_cfg, args.seed)
        return model, train(model, records, idx, val_idx, hp, args.seed, run["augmentation"],
                            checkpoint_path=out / "model.ckpt", report_path=out / "report.jsonl")

    try:
        model, report = fit(train_idx)
        if run["retrain_full"]:
            model, report = fit(train_idx + val_idx)
    except TrainingDiverged as exc:
        atomic_write_bytes(out / "report.jsonl", exc.report.to_jsonl().encode())
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TrainingError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    for e in report.epochs:
        print(json.dumps(asdict(e), sort_keys=True))
    return EXIT_OK


def cmd_train_detect(args) -> int:
    return _run_train(args, "detect")


def cmd_train_seg(args) -> int:
    return _run_train(args, "seg")


# --------------------------------------------------------------------------
# eval


def _workers() -> int:
    raw = os.environ.get("CBSTM_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise UsageError(f"CBSTM_THREADS must be an integer, got {raw!r}")
    return os.cpu_count() or 1


def _load_model(path: str, phase: str):
    try:
        model = load_checkpoint(path)
    except (CheckpointError, ConfigurationError, ValueError) as exc:
        raise UsageError(f"checkpoint {path}: {exc}") from exc
    want = "classifier" if phase == "detect" else "segmenter"
    if model.kind != want:
        raise UsageError(f"checkpoint {path} holds a {model.kind}, phase {phase} needs a {want}")
    return model


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def _select(entries: list[dict], split: str) -> list[dict]:
    chosen = entries if split == "all" else [e for e in entries if e["split"] == split]
    if not chosen:
        raise UsageError(f"no manifest records in split {split!r}")
    return chosen


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint, args.phase)
    entries = _select(_load_manifest(args.manifest), args.split)
    if args.phase == "seg":
        entries = [e for e in entries if e["label"] == ds.COVID and e.get("mask_path")]
        if not entries:
            raise UsageError("no COVID records with masks to evaluate")
    records = _records_for_phase(entries, args.phase, model.config.input_size)
    out = Path(args.out)
    workers = _workers()
    mode = "detection" if args.phase == "detect" else "segmentation"
    preds = evaluate(model, records, mode, workers=workers)
    if args.phase == "detect":
        report = _detection_outputs(model, records, preds, args.threshold, out)
    else:
        report = _segmentation_outputs(records, preds, out)
    _write_text(out / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: v for k, v in report.items() if not isinstance(v, (dict, list))}, sort_keys=True))
    return EXIT_OK


def _detection_outputs(model, records, preds, threshold: float, out: Path) -> dict:
    scores = preds.probabilities[:, ds.class_index(ds.COVID)]
    labels = preds.targets
    counts = metrics.confusion_from_predictions(scores, labels, threshold)
    rep = metrics.detection_metrics(counts)
    if 0 < labels.sum() < len(labels):
        roc, rep.roc_auc = metrics.roc_curve(scores, labels)
        _write_text(out / "roc.csv", roc.to_csv())
    else:
        rep.degenerate.append("roc_auc")
    if labels.sum() > 0:
        pr, rep.pr_auc = metrics.pr_curve(scores, labels)
        _write_text(out / "pr.csv", pr.to_csv())
    else:
        rep.degenerate.append("pr_auc")
    feats = np.concatenate([
        extract_features(model, Tensor(np.stack([r.image.transpose(2, 0, 1) for r in records[i : i + 12]])))
        for i in range(0, len(records), 12)
    ])
    k = min(3, feats.shape[1], len(records) - 1)
    if k >= 1:
        proj = metrics.pca_project(feats, k)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "label"] + [f"pc{i + 1}" for i in range(proj.coordinates.shape[1])])
        for rec, row in zip(records, proj.coordinates):
            w.writerow([rec.id, rec.label] + [repr(float(v)) for v in row])
        _write_text(out / "pca.csv", buf.getvalue())
        pca_info = {"explained_variance_percent": [float(v) for v in proj.explained_variance],
                    "rank_deficient": proj.rank_deficient}
    else:
        pca_info = {"explained_variance_percent": [], "rank_deficient": True}
    d = rep.to_dict()
    d.update({"threshold": threshold, "records": len(records), "pca": pca_info})
    return d


def _segmentation_outputs(records, preds, out: Path) -> dict:
    labels = preds.probabilities.argmax(axis=1)
    scored = [metrics.score_image(labels[i], preds.targets[i]) for i in range(len(records))]
    report = metrics.aggregate_segmentation(scored)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "dice_covid", "iou_covid", "bf_covid", "dice_background", "iou_background",
                "bf_background", "pixel_accuracy"])
    for rec, s in zip(records, scored):
        w.writerow([rec.id, s.dice[1], s.iou[1], s.bf[1], s.dice[0], s.iou[0], s.bf[0], s.correct_total / s.pixels])
    _write_text(out / "per_image.csv", buf.getvalue())
    return report.to_dict()


# --------------------------------------------------------------------------
# predict


def cmd_predict(args) -> int:
    detector = _load_model(args.detect_ckpt, "detect")
    segmenter = _load_model(args.seg_ckpt, "seg")
    try:
        image = load_image(args.image)
    except (OSError, ValueError) as exc:
        raise UsageError(f"{args.image}: {exc}") from exc
    h, w = image.shape[:2]
    x = resize_bilinear(image, detector.config.input_size).transpose(2, 0, 1)[None]
    with no_grad():
        probs = detector.forward(Tensor(x), "eval").data[0, :, 0, 0]
    p_covid = float(probs[ds.class_index(ds.COVID)])
    label = ds.COVID if p_covid >= args.threshold else ds.HEALTHY
    out = Path(args.out)
    stem = _stem(Path(args.image))
    verdict: dict[str, Any] = {"label": label, "probability": p_covid}
    if label == ds.COVID:
        xs = resize_bilinear(image, segmenter.config.input_size).transpose(2, 0, 1)[None]
        with no_grad():
            seg = segmenter.forward(Tensor(xs), "eval").data[0].argmax(axis=0)
        mask = resize_nearest(seg.astype(np.uint8), (h, w))
        mask_path = out / f"{stem}_mask.png"
        save_mask(mask_path, mask)
        verdict["mask_path"] = mask_path.name
    _write_text(out / f"{stem}_verdict.json", json.dumps(verdict, sort_keys=True) + "\n")
    print(json.dumps(verdict, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults only for flags that have a concrete one."""

    def _get_help_string(self, action):
        if action.default is None or action.required:
            return action.help
        return super()._get_help_string(action)


def _parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="chanboost", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("slice", help="convert volumes or image trees into normalised slices", formatter_class=fmt)
    p.add_argument("--input", required=True, help="directory of .nii/.nii.gz volumes or class-name image folders")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--size", type=int, default=304, help="output slice side length")
    p.add_argument("--mask-dir", default=None, help="parallel directory of masks matched by file name")
    p.add_argument("--seed", type=int, default=0, help="seed for the train/validation/test split")
    p.add_argument("--test-fraction", type=float, default=0.20, help="fraction of records held out for testing")
    p.add_argument("--val-fraction", type=float, default=0.20, help="fraction of the remainder used for validation")
    p.add_argument("--threshold", type=int, default=1, help="positive mask pixels needed for a COVID label")
    p.set_defaults(func=cmd_slice)

    for name, func, what in (("train-detect", cmd_train_detect, "detector"), ("train-seg", cmd_train_seg, "segmenter")):
        p = sub.add_parser(name, help=f"train the {what}", formatter_class=fmt)
        p.add_argument("--manifest", required=True, help="JSON-lines manifest from 'slice'")
        p.add_argument("--config", default=None, help="JSON run config (model, hyperparameters, augmentation)")
        p.add_argument("--seed", type=int, required=True, help="seed for initialisation, shuffling and augmentation")
        p.add_argument("--out", required=True, help="output directory for model.ckpt and report.jsonl")
        p.add_argument("--epochs", type=int, default=None, help="epochs; falls back to the config, then 10")
        p.add_argument("--lr", type=float, default=None, help="learning rate; falls back to the config, then 0.001")
        p.add_argument("--batch-size", type=int, default=None, help="batch size; falls back to the config, then 12")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint on manifest records", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="JSON-lines manifest")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--phase", required=True, choices=("detect", "seg"), help="which network the checkpoint holds")
    p.add_argument("--out", required=True, help="output directory for reports and CSVs")
    p.add_argument("--threshold", type=float, default=0.5, help="COVID probability threshold")
    p.add_argument("--split", default="test", choices=("train", "validation", "test", "all"),
                   help="manifest split to evaluate")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="detect, then segment when COVID is found", formatter_class=fmt)
    p.add_argument("--image", required=True, help="PNG or PGM image")
    p.add_argument("--detect-ckpt", required=True, help="detector checkpoint")
    p.add_argument("--seg-ckpt", required=True, help="segmenter checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=0.5, help="COVID probability threshold")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

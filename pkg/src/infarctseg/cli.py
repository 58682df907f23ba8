"""``infarctseg`` command line.

Subcommands: phantom, fingerprint, preprocess, train, predict, evaluate, report.
Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 runtime failure; on
failure a single JSON line ``{"error": ..., "exit": ..., "message": ...}``
goes to stderr.
"""
from __future__ import annotations

import argparse
import contextlib
import fcntl
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import evaluation as ev
from . import network as net
from . import preprocess as pp
from . import training as tr
from .config import load_config
from .core import CaseRecord, LabelMask, LabelSchema, aisd_schema, remap_labels
from .errors import ConfigurationError, DataError, InfarctSegError, LockError, SchemaError, ShapeError
from .io import assign_folds, generate_phantom, load_manifest, random_phantom_spec, read_mask, read_volume, save_manifest
from .io.manifest import DatasetManifest, dumps
from .io.nifti import atomic_write, write_mask, write_volume
from .overlay import png_bytes, render_case

log = logging.getLogger("infarctseg")

LOCK_NAME = ".infarctseg.lock"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


@contextlib.contextmanager
def artifact_lock(directory: Path):
    """Advisory exclusive lock on an artifact directory."""
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / LOCK_NAME, "a+") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise LockError(f"{directory} is locked by another infarctseg process") from None
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _write_json(path: Path, doc) -> None:
    atomic_write(path, dumps(doc).encode())


def _binary_gt(mask: LabelMask, remap: dict, case_id: str) -> np.ndarray:
    m = remap_labels(mask, {k: v for k, v in remap.items() if k in mask.label_schema})
    if set(np.unique(m.data).tolist()) - {0, 1}:
        raise SchemaError(f"case {case_id}: label remap leaves non-binary ids {sorted(set(np.unique(m.data).tolist()) - {0, 1})}")
    return m.data


def _manifest(cfg) -> DatasetManifest:
    return load_manifest(cfg.path("manifest"))


# --------------------------------------------------------------------------
# subcommands


def cmd_phantom(args, cfg) -> dict:
    out = Path(args.out)
    if args.cases < 1:
        raise ConfigurationError("--cases must be >= 1")
    schema = aisd_schema()
    with artifact_lock(out):
        records = []
        for i in range(args.cases):
            spec = random_phantom_spec(i, args.seed, slices=args.slices, size=args.size)
            vol, mask = generate_phantom(spec, schema)
            img_rel, seg_rel = f"images/{vol.case_id}.nii.gz", f"labels/{vol.case_id}.nii.gz"
            write_volume(vol, out / img_rel)
            write_mask(mask, out / seg_rel, vol.spacing)
            records.append(CaseRecord(vol.case_id, img_rel, seg_rel))
        manifest = DatasetManifest("phantom", tuple(records), schema, seed=args.seed, root=out)
        if args.folds and args.cases >= args.folds:
            manifest = assign_folds(manifest, args.folds)
        save_manifest(manifest, out / "manifest.json")
    return {"cases": args.cases, "manifest": str(out / "manifest.json")}


def cmd_fingerprint(args, cfg) -> dict:
    manifest = _manifest(cfg)
    held = set(cfg.train.test_folds) if args.exclude_test_folds else set()
    cases = [c for c in manifest.cases if c.split_tag != "test" and c.fold_index not in held]
    if not cases:
        raise DataError("no cases available for the fingerprint")
    fp = pp.compute_fingerprint(read_volume(manifest.resolve(c.image_path), c.case_id) for c in cases)
    out = cfg.path("preprocessed")
    with artifact_lock(out):
        doc = {**fp.to_json(), "cases": [c.case_id for c in cases]}
        _write_json(out / "fingerprint.json", doc)
    return fp.to_json()


def _load_fingerprint(cfg) -> pp.DatasetFingerprint:
    path = cfg.path("preprocessed") / "fingerprint.json"
    if not path.is_file():
        raise DataError(f"fingerprint not found at {path}; run `infarctseg fingerprint` first")
    return pp.DatasetFingerprint.from_json(json.loads(path.read_text()))


def cmd_preprocess(args, cfg) -> dict:
    manifest = _manifest(cfg)
    fp = _load_fingerprint(cfg)
    out = cfg.path("preprocessed")
    done = []
    with artifact_lock(out):
        for c in manifest.cases:
            vol = read_volume(manifest.resolve(c.image_path), c.case_id)
            mask = None
            if c.mask_path is not None:
                raw = read_mask(manifest.resolve(c.mask_path), manifest.label_schema)
                if raw.shape != vol.shape:
                    raise ShapeError(f"case {c.case_id}: mask extents {raw.shape} differ from image {vol.shape}")
                mask = LabelMask(_binary_gt(raw, cfg.label_remap, c.case_id), LabelSchema.binary())
            case = pp.preprocess_case(vol, mask, fp, cfg.preprocess)
            pp.save_preprocessed(case, out, cfg.preprocess.target_spacing)
            done.append(c.case_id)
        _write_json(out / "plan.json", {"preprocess": cfg.to_json()["preprocess"], "label_remap": cfg.to_json()["label_remap"], "cases": done})
    return {"cases": len(done), "out": str(out)}


def _run_dir(fold: Optional[int]) -> str:
    return "all" if fold is None else f"fold_{fold}"


def cmd_train(args, cfg) -> dict:
    manifest = _manifest(cfg)
    out = cfg.path("checkpoints")
    with artifact_lock(out):
        if args.cv:
            summary = tr.run_cross_validation(manifest, cfg.network, cfg.train, cfg.path("preprocessed"), out)
            return summary.to_json()
        res = tr.train_fold(manifest, args.fold, cfg.network, cfg.train, cfg.path("preprocessed"), out / _run_dir(args.fold))
    last = res.records[-1]
    return {"checkpoint": str(res.final_checkpoint), "epochs": len(res.records), "train_loss": last.train_loss, "val_dice": last.val_dice}


def _pick_checkpoint(args, cfg) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    run = cfg.path("checkpoints") / _run_dir(args.fold)
    for name in ("best.ckpt", "final.ckpt"):
        if (run / name).is_file():
            return run / name
    raise DataError(f"no checkpoint in {run}; run `infarctseg train` first or pass --checkpoint")


def cmd_predict(args, cfg) -> dict:
    manifest = _manifest(cfg)
    ckpt = _pick_checkpoint(args, cfg)
    net_cfg, params, _ = net.load_checkpoint(ckpt)
    cases = manifest.cases if args.eval_fold is None else manifest.fold_cases(args.eval_fold)
    out = cfg.path("predictions")
    written = []
    with artifact_lock(out):
        for c in cases:
            case = pp.load_preprocessed(cfg.path("preprocessed"), c.case_id)
            patch_pred = tr.predict_masks(net_cfg, params, case.image)
            pred = pp.restore_prediction(patch_pred, case.sidecar, cfg.preprocess.mask_order, cfg.preprocess.mask_threshold)
            vol = read_volume(manifest.resolve(c.image_path), c.case_id)
            write_mask(LabelMask(pred, LabelSchema.binary()), out / f"{c.case_id}.nii.gz", vol.spacing, vol.orientation)
            written.append(c.case_id)
    return {"checkpoint": str(ckpt), "cases": len(written), "out": str(out)}


def cmd_evaluate(args, cfg) -> dict:
    manifest = _manifest(cfg)
    pred_dir = Path(args.predictions) if args.predictions else cfg.path("predictions")
    out = cfg.path("evaluation")
    cases, masks, sources = [], {}, {}
    for c in manifest.cases:
        if c.mask_path is None:
            continue
        if args.eval_fold is not None and c.fold_index != args.eval_fold:
            continue
        pred_path = pred_dir / f"{c.case_id}.nii.gz"
        if not pred_path.is_file():
            raise DataError(f"case {c.case_id}: prediction missing at {pred_path}")
        gt = _binary_gt(read_mask(manifest.resolve(c.mask_path), manifest.label_schema), cfg.label_remap, c.case_id)
        pred = read_mask(pred_path, LabelSchema.binary()).data
        if pred.shape != gt.shape:
            raise ShapeError(f"case {c.case_id}: prediction extents {pred.shape} differ from ground truth {gt.shape}")
        cases.append(ev.case_metrics(c.case_id, pred, gt))
        masks[c.case_id] = (pred, gt)
        sources[c.case_id] = {
            "image": str(manifest.resolve(c.image_path).resolve()),
            "mask": str(manifest.resolve(c.mask_path).resolve()),
            "prediction": str(pred_path.resolve()),
        }
    if not cases:
        raise DataError("no cases with ground truth to evaluate")
    flagged = ev.flag_outliers(cases, masks, cfg.evaluation)
    report = ev.aggregate(flagged, exclude_flagged=True, rule_config=cfg.evaluation)
    with artifact_lock(out):
        atomic_write(out / "metrics.csv", ev.cases_to_csv(flagged).encode())
        atomic_write(out / "aggregate.json", ev.aggregate_to_json(report).encode())
        _write_json(out / "sources.json", {"cases": sources, "label_remap": {str(k): v for k, v in sorted(cfg.label_remap.items())}, "label_schema": manifest.label_schema.to_json()})
    return report.to_json()


def _table(report: ev.AggregateReport) -> str:
    rows = [
        ("All cases", report.n_cases, report.mean_dice, report.mean_iou),
        ("Excluding outliers", report.n_cases - len(report.excluded_case_ids), report.adjusted_mean_dice, report.adjusted_mean_iou),
    ]
    lines = ["| Subset | Cases | Mean Dice | Mean IoU |", "|---|---|---|---|"]
    lines += [f"| {name} | {n} | {d:.3f} | {i:.3f} |" for name, n, d, i in rows]
    lines.append(f"| External reference (not computed) | - | {ev.EXTERNAL_REFERENCE_DICE:.3f} | - |")
    return "\n".join(lines)


def cmd_report(args, cfg) -> dict:
    src = Path(args.evaluation) if args.evaluation else cfg.path("evaluation")
    try:
        cases = ev.cases_from_csv((src / "metrics.csv").read_text())
        report = ev.AggregateReport.from_json(json.loads((src / "aggregate.json").read_text()))
        sources = json.loads((src / "sources.json").read_text())
    except FileNotFoundError as e:
        raise DataError(f"evaluation artifact missing: {e.filename}; run `infarctseg evaluate` first") from None
    out = cfg.path("reports")
    remap = {int(k): v for k, v in sources.get("label_remap", {}).items()}
    schema = LabelSchema.from_json(sources["label_schema"])
    overlays = {}
    with artifact_lock(out):
        if not args.no_overlays:
            for case in cases:
                s = sources["cases"].get(case.case_id)
                if s is None:
                    continue
                vol = read_volume(s["image"], case.case_id)
                gt = _binary_gt(read_mask(s["mask"], schema), remap, case.case_id)
                pred = read_mask(s["prediction"], LabelSchema.binary()).data
                k, rgb = render_case(vol.data, gt, pred, cfg.overlay)
                name = f"overlays/{case.case_id}.png"
                atomic_write(out / name, png_bytes(rgb))
                overlays[case.case_id] = {"file": name, "slice": k}
        doc = {
            "aggregate": report.to_json(),
            "cases": [
                {
                    "case_id": c.case_id,
                    "dice": c.dice,
                    "iou": c.iou,
                    "gt_voxels": c.gt_voxels,
                    "pred_voxels": c.pred_voxels,
                    "outlier_flags": sorted(c.outlier_flags),
                    "both_empty": c.both_empty,
                    "overlay": overlays.get(c.case_id),
                }
                for c in cases
            ],
        }
        _write_json(out / "report.json", doc)
        atomic_write(out / "report.md", (f"# Segmentation report\n\n{_table(report)}\n\nExcluded: {', '.join(report.excluded_case_ids) or 'none'}\n").encode())
    return {"report": str(out / "report.json"), "mean_dice": report.mean_dice, "adjusted_mean_dice": report.adjusted_mean_dice}


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config leaf, e.g. train.epochs=10")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="infarctseg", description="NCCT infarct segmentation pipeline")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", parents=[common], help="write a synthetic phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--cases", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--slices", type=int, default=3)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--folds", type=int, default=5, help="assign k folds when there are enough cases (0 disables)")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("fingerprint", parents=[common], help="compute intensity statistics")
    s.add_argument("--exclude-test-folds", action="store_true", help="leave the designated test folds out of the statistics")
    s.set_defaults(func=cmd_fingerprint)

    s = sub.add_parser("preprocess", parents=[common], help="normalise, resample and patch every case")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", parents=[common], help="train one fold or run cross-validation")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--fold", type=int, help="hold out this fold for validation (default: train on all cases)")
    g.add_argument("--cv", action="store_true", help="cross-validation per train.cv_mode")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", parents=[common], help="segment cases with a checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--fold", type=int, help="use the checkpoint of this training fold")
    s.add_argument("--eval-fold", type=int, help="only predict cases of this fold")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", parents=[common], help="per-case metrics and aggregates")
    s.add_argument("--predictions", help="prediction directory (default: paths.predictions)")
    s.add_argument("--eval-fold", type=int)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", parents=[common], help="report and overlays from evaluation artifacts")
    s.add_argument("--evaluation", help="evaluation directory (default: paths.evaluation)")
    s.add_argument("--no-overlays", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigurationError):
        return 1
    if isinstance(exc, (DataError, FileNotFoundError)):
        return 2
    return 3


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, args.overrides)
        result = args.func(args, cfg)
        print(json.dumps(result, sort_keys=True))
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes an exit code
        code = exit_code(exc)
        kind = type(exc).__name__ if isinstance(exc, (InfarctSegError, OSError)) else "RuntimeFailure"
        print(json.dumps({"error": kind, "exit": code, "message": str(exc)}), file=sys.stderr)
        if code == 3:
            log.debug("unhandled failure", exc_info=True)
        return code


if __name__ == "__main__":
    sys.exit(main())

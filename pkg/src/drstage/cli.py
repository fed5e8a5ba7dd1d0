"""Command-line surface: preprocess, train, eval, classify.

Exit codes: 0 success, 2 input/IO error, 3 persistence (checkpoint write)
error, 4 domain-validation failure (an image the pipeline cannot use).
Reports go to <out>/report.json and <out>/report.txt with stable key order
and floats at 6 significant digits; logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import ensemble, models, training
from .errors import (
    DecodeError,
    DegenerateRadius,
    DrstageError,
    EmptyDataset,
    FormatError,
    InvalidConfig,
    IoError,
    MissingClassDir,
    MissingRoot,
    NoForeground,
)
from .metrics import confusion_matrix, metrics_report
from .preprocess import PreprocessConfig, preprocess_fundus, read_image, resize_bilinear, write_png

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PERSIST = 3
EXIT_DOMAIN = 4

DEFAULTS = {
    "seed": 0,
    "out": "out",
    # preprocessing
    "scale": 300.0,
    "black_threshold": 50,
    "mask_fraction": 0.9,
    "intermediate_size": 512,
    "preprocess_size": 200,
    # dataset
    "image_size": 200,
    "rescale": "none",
    "val_root": None,
    # training
    "init_lr": 0.0001,
    "lr_drop": 0.96,
    "momentum": 0.9,
    "nesterov": True,
    "batch_size": 50,
    "val_batch_size": 2,
    "max_epochs": 400,
    "loss": "hinge",
    "width_scale": 1.0,
    # transfer-learning stack
    "extractor_input": 299,
    "feature_dim": 2048,
}


def log(message: str) -> None:
    print(message, file=sys.stderr)


def round_floats(value, sig=6):
    """Round every float to `sig` significant digits for stable report bytes."""
    if isinstance(value, float):
        return float(f"{value:.{sig}g}")
    if isinstance(value, dict):
        return {k: round_floats(v, sig) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [round_floats(v, sig) for v in value]
    return value


def dump_report(doc: dict, path: Path) -> None:
    path.write_text(json.dumps(round_floats(doc), indent=2, sort_keys=True) + "\n", "utf-8")


def load_run_config(args) -> dict:
    """defaults <- config file <- command-line overrides, echoed to the log."""
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text("utf-8"))
        except OSError as exc:
            raise IoError(args.config, str(exc)) from exc
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config file {args.config} is not valid JSON: {exc}") from exc
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    log("resolved config: " + json.dumps(round_floats(cfg), sort_keys=True))
    return cfg


def preprocess_config(cfg: dict) -> PreprocessConfig:
    return PreprocessConfig(
        scale=float(cfg["scale"]),
        black_threshold=int(cfg["black_threshold"]),
        mask_fraction=float(cfg["mask_fraction"]),
        intermediate_size=int(cfg["intermediate_size"]),
    )


def train_config(cfg: dict, scheme: str, seed: int) -> training.TrainConfig:
    shared = dict(
        init_lr=float(cfg["init_lr"]),
        lr_drop=float(cfg["lr_drop"]),
        momentum=float(cfg["momentum"]),
        nesterov=bool(cfg["nesterov"]),
        batch_size=int(cfg["batch_size"]),
        val_batch_size=int(cfg["val_batch_size"]),
        max_epochs=int(cfg["max_epochs"]),
        loss=str(cfg["loss"]),
        seed=seed,
    )
    if scheme == "cascade":
        return training.transfer_head_config(**shared)
    return training.TrainConfig(
        epochs_drop=7, early_stop_value=0.999, patience=50, **shared
    )


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    cfg = load_run_config(args)
    in_root = Path(args.in_root)
    out_root = Path(args.out_root)
    if not in_root.is_dir():
        log(f"error: input root {in_root} does not exist")
        return EXIT_INPUT
    pcfg = preprocess_config(cfg)
    size = int(cfg["preprocess_size"])

    images = sorted(
        p for p in in_root.rglob("*") if p.is_file() and p.suffix.lower() in ds.IMAGE_EXTENSIONS
    )
    processed, skipped = 0, []
    per_class = {}
    for path in images:
        rel = path.relative_to(in_root)
        try:
            img = preprocess_fundus(read_image(path), pcfg)
        except (NoForeground, DegenerateRadius) as exc:
            log(f"warning: skipping {path}: {exc}")
            skipped.append({"path": str(path), "reason": str(exc)})
            continue
        img = resize_bilinear(img, size, size)
        target = (out_root / rel).with_suffix(".png")
        target.parent.mkdir(parents=True, exist_ok=True)
        write_png(img, target)
        processed += 1
        key = rel.parts[0] if len(rel.parts) > 1 else "."
        per_class[key] = per_class.get(key, 0) + 1

    for key in sorted(per_class):
        print(f"class {key}: {per_class[key]} images")
    print(f"processed {processed}, skipped {len(skipped)}")
    try:
        out_root.mkdir(parents=True, exist_ok=True)
        dump_report(
            {"processed": processed, "skipped": skipped, "per_class": per_class},
            out_root / "preprocess_report.json",
        )
    except OSError as exc:
        log(f"error: cannot write sidecar report: {exc}")
        return EXIT_PERSIST
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_split(root, image_size, rescale):
    index = ds.scan_directory(root)
    return ds.load_arrays(index, (image_size, image_size), rescale)


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    seed = int(cfg["seed"])
    out_dir = Path(cfg["out"])
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        log(f"error: cannot create output directory: {exc}")
        return EXIT_PERSIST

    mode = args.mode
    try:
        if mode == "cascade":
            size = int(cfg["extractor_input"])
        else:
            size = int(cfg["image_size"])
        train_arrays = _load_split(args.train_root, size, cfg["rescale"])
        val_root = cfg["val_root"] or args.train_root
        if val_root == args.train_root:
            val_arrays = train_arrays
            log("note: no val_root given; validating on the training split")
        else:
            val_arrays = _load_split(val_root, size, cfg["rescale"])
    except (MissingRoot, MissingClassDir, EmptyDataset, DecodeError, IoError) as exc:
        log(f"error: {exc}")
        return EXIT_INPUT

    try:
        if mode == "cascade":
            extractor = models.StubFeatureExtractor(
                seed, (size, size), int(cfg["feature_dim"])
            )
            train_features = (extractor.extract(train_arrays[0]), train_arrays[1])
            val_features = (
                train_features if val_arrays is train_arrays
                else (extractor.extract(val_arrays[0]), val_arrays[1])
            )
            stage_paths = {}
            for stage in (1, 2, 3, 4):  # trained mild -> proliferative
                head = models.init_weights(
                    models.build_binary_head(extractor.feature_dim), seed + stage
                )
                tc = train_config(cfg, "cascade", seed + stage)
                path = out_dir / f"cascade_stage{stage}_vs_normal.drsm"
                history = training.fit_binary_pair(head, train_features, val_features, 0, stage, tc, path)
                (out_dir / f"history_cascade_stage{stage}.jsonl").write_text(
                    history.to_jsonl(), "utf-8"
                )
                log(
                    f"stage {stage}: best val acc {history.best_val_acc:.4f} "
                    f"at epoch {history.best_epoch} ({history.stop_reason})"
                )
                stage_paths[stage] = path.name
            manifest = out_dir / "manifest.json"
            ensemble.write_manifest(
                manifest,
                "cascade",
                [stage_paths[s] for s in ensemble.CASCADE_STAGE_ORDER],
                extractor={
                    "kind": "stub",
                    "seed": seed,
                    "input_hw": [size, size],
                    "feature_dim": extractor.feature_dim,
                },
            )
        else:
            model_names = []
            for i, (a, b) in enumerate(ensemble.OVO_PAIRS):
                net = models.init_weights(
                    models.build_small_inception(
                        (size, size), 3, 2, width_scale=float(cfg["width_scale"])
                    ),
                    seed + i,
                )
                tc = train_config(cfg, "ovo", seed + i)
                path = out_dir / f"ovo_{a}vs{b}.drsm"
                history = training.fit_binary_pair(net, train_arrays, val_arrays, a, b, tc, path)
                (out_dir / f"history_ovo_{a}vs{b}.jsonl").write_text(history.to_jsonl(), "utf-8")
                log(
                    f"pair ({a},{b}): best val acc {history.best_val_acc:.4f} "
                    f"at epoch {history.best_epoch} ({history.stop_reason})"
                )
                model_names.append(path.name)
            manifest = out_dir / "manifest.json"
            ensemble.write_manifest(manifest, "ovo", model_names)
    except (IoError, OSError) as exc:
        log(f"error: checkpoint write failed: {exc}")
        return EXIT_PERSIST
    except EmptyDataset as exc:
        log(f"error: {exc}")
        return EXIT_INPUT

    print(f"wrote manifest {manifest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def format_table(cm_counts, stage_names) -> str:
    """Aligned text confusion matrix, truth on rows."""
    width = max(len(n) for n in stage_names) + 2
    cell = max(6, max(len(str(v)) for row in cm_counts for v in row) + 1)
    lines = [" " * width + "".join(f"{n[:cell - 1]:>{cell}}" for n in stage_names)]
    for name, row in zip(stage_names, cm_counts):
        lines.append(f"{name:<{width}}" + "".join(f"{v:>{cell}}" for v in row))
    return "\n".join(lines)


def evaluate_manifest(predictor, index, rescale, chunk=64):
    truth, pred = [], []
    h, w = predictor.input_hw
    for start in range(0, len(index.entries), chunk):
        part = index.entries[start : start + chunk]
        batch = ds.load_batch(part, (h, w), k=ds.NUM_STAGES, rescale=rescale)
        labels = predictor.predict(batch.images)
        truth.extend(label for _, label in part)
        pred.extend(int(v) for v in labels)
    return confusion_matrix(truth, pred, ds.NUM_STAGES)


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    out_dir = Path(cfg["out"])
    try:
        predictor = ensemble.load_predictor(args.manifest)
        index = ds.scan_directory(args.data_root)
        if not index.entries:
            raise EmptyDataset(f"no images under {args.data_root}")
        cm = evaluate_manifest(predictor, index, cfg["rescale"])
    except (FormatError, IoError, MissingRoot, MissingClassDir, EmptyDataset, DecodeError) as exc:
        log(f"error: {exc}")
        return EXIT_INPUT

    report = metrics_report(cm, binary_collapse=(predictor.scheme == "cascade"))
    report["scheme"] = predictor.scheme
    report["dataset_root"] = str(args.data_root)
    table = format_table(cm.counts.tolist(), ds.STAGE_NAMES)
    summary = f"accuracy {report['accuracy']:.4f}  kappa {report['kappa']:.4f}"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        dump_report(report, out_dir / "report.json")
        (out_dir / "report.txt").write_text(table + "\n\n" + summary + "\n", "utf-8")
    except OSError as exc:
        log(f"error: cannot write report: {exc}")
        return EXIT_PERSIST
    print(table)
    print(summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# classify
# ---------------------------------------------------------------------------

def cmd_classify(args) -> int:
    cfg = load_run_config(args)
    try:
        predictor = ensemble.load_predictor(args.manifest)
    except (FormatError, IoError) as exc:
        log(f"error: {exc}")
        return EXIT_INPUT
    try:
        img = read_image(args.image)
    except (IoError, DecodeError) as exc:
        log(f"error: {exc}")
        return EXIT_INPUT
    try:
        img = preprocess_fundus(img, preprocess_config(cfg))
    except NoForeground:
        log("error: no retinal foreground detected")
        return EXIT_DOMAIN
    except DegenerateRadius:
        log("error: retina radius could not be estimated")
        return EXIT_DOMAIN

    h, w = predictor.input_hw
    batch = resize_bilinear(img, w, h).pixels.astype(np.float32)[None]
    if cfg["rescale"] == "unit":
        batch = batch / 255.0
    label = int(predictor.predict(batch)[0])
    scores = predictor.class_scores(batch)[0]
    print(f"{ds.STAGE_NAMES[label]} ({label})")
    for stage, score in enumerate(scores):
        print(f"  {ds.STAGE_NAMES[stage]} ({stage}): {score:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drstage", description="Diabetic retinopathy staging pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="RNG seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("preprocess", help="preprocess an image tree")
    common(p)
    p.add_argument("--in", dest="in_root", required=True, help="input image root")
    p.add_argument("--out-root", dest="out_root", required=True, help="output image root")
    p.add_argument("--scale", type=float, help="target retina radius")
    p.add_argument("--preprocess-size", dest="preprocess_size", type=int, help="final square edge")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train an ensemble")
    common(p)
    p.add_argument("--mode", choices=("cascade", "ovo"), required=True)
    p.add_argument("--data", dest="train_root", required=True, help="training dataset root")
    p.add_argument("--val-data", dest="val_root", help="validation dataset root")
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--width-scale", dest="width_scale", type=float)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--extractor-input", dest="extractor_input", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate an ensemble over a dataset")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--data", dest="data_root", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("classify", help="stage a single fundus image")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_classify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DrstageError as exc:
        log(f"error: {exc}")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

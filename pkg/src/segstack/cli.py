"""Command-line interface: synth, train, predict, evaluate, report.

Configuration precedence is defaults < JSON config file (--config) <
explicit command-line flags. Exit codes: 0 success, 2 configuration
error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from segstack import metrics, stacking, synth
from segstack.combiner import decide, write_membership_dump
from segstack.errors import ConfigError, DataError, NumericalError, SegstackError
from segstack.imagery import ChannelImage, LabelImage, load_dataset, load_image_file
from segstack.learners import SegmenterSpec
from segstack.solver import SOLVER_MODES
from segstack.stacking import DEFAULT_FOLDS, DEFAULT_SEED

DEFAULT_LEARNERS = ("naiveBayesPatch", "logisticPixel", "knnPatch")


@dataclass
class RunConfig:
    """Assembled training configuration."""

    data_root: str
    out_dir: str
    class_count: int = 3
    specs: list = field(default_factory=list)
    layer2_specs: list | None = None
    fold_count: int = DEFAULT_FOLDS
    seed: int = DEFAULT_SEED
    workers: int = 1
    solver_mode: str = "bvls"
    ole: bool = False
    legacy_empty_zero: bool = False

    def __post_init__(self):
        if not self.specs:
            self.specs = [SegmenterSpec(kind, seed=self.seed + i)
                          for i, kind in enumerate(DEFAULT_LEARNERS)]
        if self.layer2_specs is not None and len(self.layer2_specs) != len(self.specs):
            raise ConfigError("config 'learners2' must list as many entries as 'learners'")
        if self.class_count < 2:
            raise ConfigError(f"class count must be >= 2, got {self.class_count}")
        if self.fold_count < 2:
            raise ConfigError(f"fold count must be >= 2, got {self.fold_count}")
        if self.solver_mode not in SOLVER_MODES:
            raise ConfigError(f"unknown solver mode {self.solver_mode!r}")
        if self.workers < 1:
            raise ConfigError(f"worker budget must be >= 1, got {self.workers}")
        if not self.data_root:
            raise ConfigError("no dataset root given (--data or config 'data')")
        if not self.out_dir:
            raise ConfigError("no output directory given (--out or config 'out')")


def _load_config_file(path) -> dict:
    try:
        blob = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(blob, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return blob


def _build_run_config(args) -> RunConfig:
    file_cfg = _load_config_file(args.config) if args.config else {}
    def pick(flag_value, key, fallback):
        if flag_value is not None:
            return flag_value
        return file_cfg.get(key, fallback)

    seed = int(pick(args.seed, "seed", DEFAULT_SEED))

    def parse_spec_list(entries, key):
        if not isinstance(entries, list) or not entries:
            raise ConfigError(f"config {key!r} must be a non-empty list")
        parsed = []
        for i, entry in enumerate(entries):
            if isinstance(entry, str):
                parsed.append(SegmenterSpec(entry, seed=seed + i))
            else:
                parsed.append(SegmenterSpec.from_json_dict(entry))
        return parsed

    specs = []
    if args.learners is not None:
        names = [name.strip() for name in args.learners.split(",") if name.strip()]
        specs = [SegmenterSpec(kind, seed=seed + i) for i, kind in enumerate(names)]
    elif "learners" in file_cfg:
        specs = parse_spec_list(file_cfg["learners"], "learners")
    layer2_specs = None
    if "learners2" in file_cfg:
        layer2_specs = parse_spec_list(file_cfg["learners2"], "learners2")
    return RunConfig(
        data_root=pick(args.data, "data", None),
        out_dir=pick(args.out, "out", None),
        class_count=int(pick(args.classes, "classes", 3)),
        specs=specs,
        layer2_specs=layer2_specs,
        fold_count=int(pick(args.folds, "folds", DEFAULT_FOLDS)),
        seed=seed,
        workers=int(pick(args.workers, "workers", 1)),
        solver_mode=pick(args.solver, "solver", "bvls"),
        ole=bool(args.ole or file_cfg.get("ole", False)),
        legacy_empty_zero=bool(args.legacy_empty_zero or file_cfg.get("legacy_empty_zero", False)),
    )


def _cmd_synth(args) -> int:
    try:
        width, height = (int(v) for v in args.size.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"--size must look like 64x64, got {args.size!r}") from exc
    stats = synth.generate_dataset(args.out, args.images, width, height,
                                   args.classes, args.seed)
    print(f"wrote {stats['image_count']} image/mask pairs to {args.out}")
    print("class pixel fractions:", " ".join(f"{f:.3f}" for f in stats["class_fractions"]))
    return 0


def _cmd_train(args) -> int:
    cfg = _build_run_config(args)
    data = load_dataset(cfg.data_root, cfg.class_count)
    started = time.perf_counter()
    model, report = stacking.train_ensemble(
        data, cfg.specs, fold_count=cfg.fold_count, seed=cfg.seed,
        solver_mode=cfg.solver_mode, ole=cfg.ole, workers=cfg.workers,
        specs2=cfg.layer2_specs,
    )
    elapsed = time.perf_counter() - started
    out_dir = Path(cfg.out_dir)
    stacking.save_ensemble(model, out_dir)
    (out_dir / "training_report.json").write_text(
        json.dumps(report.to_json_dict(), sort_keys=True, separators=(",", ":")) + "\n"
    )
    mode = "one-layer" if cfg.ole else "two-layer"
    print(f"trained {mode} ensemble: K={model.model_count}, M={model.class_count},"
          f" T={model.fold_count}, rows={report.row_count}, {elapsed:.1f}s")
    print("fitted residuals:", " ".join(f"{r:.1f}" for r in report.fitted_residuals))
    print(f"model written to {out_dir}")
    return 0


def _iter_image_files(image_dir: Path):
    if (image_dir / "images").is_dir():
        image_dir = image_dir / "images"
    files = sorted(image_dir.glob("*.png"))
    if not files:
        raise DataError(f"no PNG images found under {image_dir}")
    return files


def _cmd_predict(args) -> int:
    model = stacking.load_ensemble(args.model)
    if args.single_model is not None and not (0 <= args.single_model < model.model_count):
        raise ConfigError(
            f"--single-model index {args.single_model} out of range 0..{model.model_count - 1}"
        )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for path in _iter_image_files(Path(args.data)):
        image = ChannelImage(load_image_file(path), stem=path.stem)
        if args.single_model is not None:
            pm = model.layer1[args.single_model].segment(image)
            labels = LabelImage(np.argmax(pm.planes, axis=0).astype(np.uint8))
            cm = None
        else:
            cm = stacking.predict_membership(model, image)
            labels = decide(cm)
        Image.fromarray(labels.labels, mode="L").save(out_dir / f"{path.stem}.png")
        if args.dump_maps and cm is not None:
            write_membership_dump(cm, out_dir / f"{path.stem}.cm.pmap")
        count += 1
    print(f"wrote {count} predicted masks to {out_dir}")
    return 0


def _load_mask_dir(mask_dir: Path) -> dict:
    if (mask_dir / "masks").is_dir():
        mask_dir = mask_dir / "masks"
    masks = {}
    for path in sorted(mask_dir.glob("*.png")):
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L") if img.mode == "P" else img)
        if arr.ndim != 2:
            raise DataError(f"mask {path} is not single-channel")
        masks[path.stem] = LabelImage(arr.astype(np.uint8))
    if not masks:
        raise DataError(f"no PNG masks found under {mask_dir}")
    return masks


def _cmd_evaluate(args) -> int:
    preds = _load_mask_dir(Path(args.pred))
    truths = _load_mask_dir(Path(args.truth))
    stems = sorted(preds)
    missing = sorted(set(stems) - set(truths))
    if missing:
        raise DataError(f"no ground-truth mask for prediction '{missing[0]}'")
    report = metrics.evaluate([preds[s] for s in stems], [truths[s] for s in stems],
                              args.classes, method=args.method,
                              legacy_empty_zero=args.legacy_empty_zero)
    print(metrics.comparison_table([report]), end="")
    if args.out:
        Path(args.out).write_text(report.to_json())
        print(f"report written to {args.out}")
    return 0


def _cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        try:
            blob = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise DataError(f"report not found: {path}") from exc
        reports.append(metrics.MetricReport.from_json_dict(blob))
    table = metrics.comparison_table(reports)
    print(table, end="")
    if args.out:
        Path(args.out).write_text(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segstack",
        description="Two-layer stacked segmentation ensembles with least-squares fusion weights.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    p_synth.add_argument("--out", required=True, help="dataset directory to create")
    p_synth.add_argument("--images", type=int, default=60, help="number of image/mask pairs")
    p_synth.add_argument("--size", default="64x64", help="image size as WxH")
    p_synth.add_argument("--classes", type=int, default=3, help="number of classes incl. background")
    p_synth.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p_synth.set_defaults(func=_cmd_synth)

    p_train = sub.add_parser("train", help="train an ensemble on a dataset")
    p_train.add_argument("--config", help="JSON config file; flags override its values")
    p_train.add_argument("--data", help="dataset root (images/ + masks/)")
    p_train.add_argument("--out", help="model output directory")
    p_train.add_argument("--classes", type=int, help="number of classes (default 3)")
    p_train.add_argument("--folds", type=int, help=f"cross-validation folds (default {DEFAULT_FOLDS})")
    p_train.add_argument("--seed", type=int, help=f"fold/learner seed (default {DEFAULT_SEED})")
    p_train.add_argument("--workers", type=int, help="concurrent training jobs (default 1)")
    p_train.add_argument("--solver", choices=SOLVER_MODES, help="weight solver mode (default bvls)")
    p_train.add_argument("--learners", help="comma-separated learner kinds (default reference trio)")
    p_train.add_argument("--ole", action="store_true",
                         help="one-layer mode: fuse first-layer maps directly")
    p_train.add_argument("--legacy-empty-zero", action="store_true", dest="legacy_empty_zero",
                         help=argparse.SUPPRESS)
    p_train.set_defaults(func=_cmd_train)

    p_pred = sub.add_parser("predict", help="segment images with a trained ensemble")
    p_pred.add_argument("--model", required=True, help="model directory from 'train'")
    p_pred.add_argument("--data", required=True, help="directory of PNG images (or dataset root)")
    p_pred.add_argument("--out", required=True, help="output directory for predicted masks")
    p_pred.add_argument("--dump-maps", action="store_true", dest="dump_maps",
                        help="also write per-image class-membership map dumps")
    p_pred.add_argument("--single-model", type=int, dest="single_model",
                        help="bypass fusion: argmax of first-layer model K (baseline rows)")
    p_pred.set_defaults(func=_cmd_predict)

    p_eval = sub.add_parser("evaluate", help="score predicted masks against ground truth")
    p_eval.add_argument("--pred", required=True, help="directory of predicted masks")
    p_eval.add_argument("--truth", required=True, help="directory of ground-truth masks")
    p_eval.add_argument("--classes", type=int, required=True, help="number of classes")
    p_eval.add_argument("--method", default="model", help="row label for the report")
    p_eval.add_argument("--legacy-empty-zero", action="store_true", dest="legacy_empty_zero",
                        help="report 0 instead of 'undefined' for one-sided empty contours")
    p_eval.add_argument("--out", help="write the report as canonical JSON")
    p_eval.set_defaults(func=_cmd_evaluate)

    p_rep = sub.add_parser("report", help="merge evaluation reports into one comparison table")
    p_rep.add_argument("reports", nargs="+", help="report JSON files from 'evaluate'")
    p_rep.add_argument("--out", help="write the table to a file")
    p_rep.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except SegstackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

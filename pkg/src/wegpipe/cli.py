#!/usr/bin/env python3
"""Command line interface for wegpipe."""
import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

from .core.config import PipelineConfig, load_config
from .core.dataset import sample_paths
from .core.errors import WegpipeError
from .tasks.pipeline import (
    SPLITS,
    BatchResult,
    StudyResult,
    run_ablate,
    run_compare,
    run_eval,
    run_gen_data,
    run_pseudo_label,
    run_train,
)

logger = logging.getLogger(__name__)


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="Run seed (dataset, initialisation, shuffling)")
    common.add_argument("--dataset-dir", dest="dataset_dir", help="Directory holding the train/val splits")
    common.add_argument("--weights", help="Weights path (without suffix)")
    common.add_argument("--output-dir", dest="output_dir", help="Directory for labels and reports")
    common.add_argument("--threads", type=int, help="Worker threads (default: WEGPIPE_THREADS or CPU count)")
    common.add_argument("--split", choices=SPLITS, help="Dataset split to work on")
    common.add_argument("--count", type=int, help="Number of samples to generate or process")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    common.add_argument("--quiet", action="store_true", help="Warnings only, no progress bars")
    return common


def _labelling_parser() -> argparse.ArgumentParser:
    labelling = argparse.ArgumentParser(add_help=False)
    labelling.add_argument("--explainer", choices=("dtd", "rollout", "cam"), help="Attention source")
    labelling.add_argument("--blocks", help="Blocks combined by dtd: last, all or a comma list")
    labelling.add_argument("--no-positive-clamp", dest="positive_clamp", action="store_false", default=None)
    labelling.add_argument("--sr", type=float, help="Soft erase rate in (0, 1]")
    labelling.add_argument("--fg-thr", dest="fg_thr", type=float, help="Foreground threshold for EPOM")
    labelling.add_argument("--tau-sal", dest="tau_sal", type=float, help="Saliency background threshold")
    labelling.add_argument("--no-epom", dest="epom", action="store_false", default=None)
    labelling.add_argument("--no-saliency", dest="saliency", action="store_false", default=None)
    labelling.add_argument("--multi-scale", dest="multi_scale", action="store_true", default=None)
    labelling.add_argument("--long-side", dest="long_side", type=int, help="Resize so the long side has this length")
    return labelling


def parse_args(argv: List[str]) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="wegpipe",
        description="Generate pseudo segmentation labels from image-level labels with a small vision transformer.",
        epilog="Example: wegpipe gen-data && wegpipe train && wegpipe pseudo-label && wegpipe eval",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_parser()
    labelling = _labelling_parser()

    sub.add_parser("gen-data", parents=[common], help="Write synthetic train and val splits")
    train = sub.add_parser("train", parents=[common], help="Train the multi-label classifier")
    train.add_argument("--epochs", type=int, help="Training epochs")
    sub.add_parser("pseudo-label", parents=[common, labelling], help="Write pseudo labels for a split")
    evaluate = sub.add_parser("eval", parents=[common], help="Score predicted masks against ground truth")
    evaluate.add_argument("pred_dir", nargs="?", help="Directory of predicted mask_XXXX.pgm files")
    evaluate.add_argument("gt_dir", nargs="?", help="Directory of ground-truth mask_XXXX.pgm files")
    sub.add_parser("compare", parents=[common, labelling], help="Pseudo-label mIoU of dtd, rollout and cam")
    sub.add_parser("ablate", parents=[common, labelling], help="Pseudo-label mIoU of component ablations")
    return parser.parse_args(argv)


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted config keys set by the flags that were given."""
    flags = {
        "seed": ("seed", "train.seed"),
        "dataset_dir": ("paths.dataset_dir",),
        "weights": ("paths.weights",),
        "output_dir": ("paths.output_dir",),
        "threads": ("threads",),
        "epochs": ("train.epochs",),
        "explainer": ("explain.explainer",),
        "blocks": ("explain.blocks",),
        "positive_clamp": ("explain.positive_clamp",),
        "sr": ("refine.sr",),
        "multi_scale": ("refine.multi_scale",),
        "long_side": ("refine.long_side",),
        "fg_thr": ("label.fg_thr",),
        "tau_sal": ("label.tau_sal",),
        "epom": ("label.epom",),
        "saliency": ("label.saliency",),
    }
    overrides: Dict[str, Any] = {}
    for flag, keys in flags.items():
        value = getattr(args, flag, None)
        if value is not None:
            for key in keys:
                overrides[key] = value
    if args.command == "gen-data" and args.count is not None:
        for split in (args.split,) if args.split else SPLITS:
            overrides[f"data.{split}_count"] = args.count
    return overrides


def configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def _report_batch(result: BatchResult, directory) -> None:
    for name in result.outputs:
        print(f"{name} -> {sample_paths(directory, name)['mask']}")
    for name, reason in result.failures.items():
        print(f"Skipped {name}: {reason}", file=sys.stderr)


def _report_study(path, study: StudyResult) -> int:
    print(json.dumps(study.scores, indent=2, sort_keys=True))
    for variant, failures in study.failures.items():
        for name, reason in failures.items():
            print(f"Skipped {name} ({variant}): {reason}", file=sys.stderr)
    print(f"report -> {path}")
    return 0 if study.ok else 1


def run_command(args: argparse.Namespace, config: PipelineConfig) -> int:
    progress = not args.quiet
    split = args.split or "val"

    if args.command == "gen-data":
        written = run_gen_data(config, (args.split,) if args.split else SPLITS)
        for name, count in written.items():
            print(f"{name}: {count} samples -> {config.paths.dataset_dir}/{name}")
        return 0

    if args.command == "train":
        run = run_train(config, progress=progress)
        for stats in run.history:
            print(f"epoch {stats.epoch}: loss {stats.loss:.5f}, accuracy {stats.accuracy:.4f}")
        if run.val_accuracy is not None:
            print(f"val accuracy {run.val_accuracy:.4f}")
        print(f"weights -> {run.weights}")
        return 0

    if args.command == "pseudo-label":
        directory, result = run_pseudo_label(config, split, args.count, progress)
        _report_batch(result, directory)
        return 0 if result.ok else 1

    if args.command == "eval":
        path, report = run_eval(config, args.pred_dir, args.gt_dir, split)
        print(report.json(indent=2, sort_keys=True))
        for name in report.missing:
            print(f"Missing prediction {name}", file=sys.stderr)
        return 0 if not report.missing else 1

    if args.command == "compare":
        return _report_study(*run_compare(config, split, args.count, progress))

    if args.command == "ablate":
        return _report_study(*run_ablate(config, split, args.count, progress))

    raise WegpipeError(f"unknown command {args.command}")


def cli_main(argv: List[str]) -> int:
    args = parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        config = load_config(args.config, config_overrides(args))
        return run_command(args, config)
    except (WegpipeError, OSError) as exc:
        logger.debug("command failed", exc_info=True)
        print(f"Error: {exc}", file=sys.stderr)
        return 1


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(cli_main(argv if argv is not None else sys.argv[1:]))

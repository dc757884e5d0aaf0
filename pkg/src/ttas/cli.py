"""Command-line entry point: ``ttas {generate,train,evaluate,experiment,ablation}``.

Every flag mirrors a config key. ``--config FILE`` loads a file first, then
any flags given on the command line override the file's values.

Exit codes: 0 success, 1 usage or input error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import synthdata, trainers
from .config import ARCH_KEYS, DATASET_KEYS, TRAIN_KEYS, ConfigError, load_config, parse_value
from .experiment import (
    CaseRow, ExperimentError, ExperimentReport, ExperimentSpec, aggregate, arch_from_values,
    evaluate_predictions, phantom_from_values, run_ablation, run_experiment, spec_from_values,
    train_config_from_values,
)
from .report import render_report
from .segnet import CheckpointFormatError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_keys(parser: argparse.ArgumentParser, section: str, keys: Sequence[str]) -> None:
    group = parser.add_argument_group(f"{section} settings")
    for key in keys:
        flags = dict.fromkeys((f"--{key.replace('_', '-')}", f"--{key}"))
        group.add_argument(*flags, dest=f"{section}.{key}",
                           metavar="VALUE", default=None, help=f"overrides {section}.{key}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ttas", description="Teacher / assistant / student segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value config file; flags override it")

    g = sub.add_parser("generate", help="write a synthetic phantom dataset")
    common(g)
    g.add_argument("--out", required=True, help="output directory")
    _add_keys(g, "dataset", DATASET_KEYS)

    t = sub.add_parser("train", help="train one method and write a checkpoint")
    common(t)
    t.add_argument("--manifest", required=True, help="dataset manifest.tsv")
    t.add_argument("--checkpoint", required=True, help="checkpoint path to write")
    t.add_argument("--method", default="ttas", choices=trainers.METHODS)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--until-epoch", type=int, help="stop after this many epochs (for staged runs)")
    _add_keys(t, "train", [k for k in TRAIN_KEYS if k != "seed"])
    t.add_argument("--seed", dest="train.seed", metavar="VALUE", default=None)
    _add_keys(t, "arch", ARCH_KEYS)

    e = sub.add_parser("evaluate", help="score a checkpoint or predicted masks on the test split")
    e.add_argument("--manifest", required=True, help="dataset manifest.tsv holding the test split")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="trained checkpoint")
    src.add_argument("--predictions", help="manifest of predicted masks (id, image, mask, split)")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--split", default="test", help="manifest split to evaluate (default: test)")

    for name, helptext in (("experiment", "run the full method comparison"),
                           ("ablation", "repeat the experiment over labeled-set sizes")):
        x = sub.add_parser(name, help=helptext)
        common(x)
        x.add_argument("--out", dest="output_dir", default=None, help="output directory")
        x.add_argument("--name", default=None)
        x.add_argument("--seeds", default=None, help="comma-separated seeds")
        x.add_argument("--seed", default=None, help="run a single seed")
        x.add_argument("--methods", default=None, help="comma-separated subset of ttas, ts, supervised")
        x.add_argument("--stratification-thresholds-ml", "--stratification_thresholds_ml",
                       dest="stratification_thresholds_ml", default=None)
        if name == "ablation":
            x.add_argument("--ablation-labeled-counts", "--ablation_labeled_counts", "--counts",
                           dest="ablation_labeled_counts", default=None)
        # the phantom seed follows each experiment seed
        _add_keys(x, "dataset", [k for k in DATASET_KEYS if k != "seed"])
        _add_keys(x, "train", [k for k in TRAIN_KEYS if k != "seed"])
        _add_keys(x, "arch", ARCH_KEYS)
    return p


def _collect_values(args: argparse.Namespace, keys: Sequence[str]) -> dict[str, Any]:
    values: dict[str, Any] = load_config(args.config) if getattr(args, "config", None) else {}
    ns = vars(args)
    for key in keys:
        raw = ns.get(key)
        if raw is not None:
            values[key] = parse_value(key, str(raw))
    return values


def _sectioned(section: str, keys) -> list[str]:
    return [f"{section}.{k}" for k in keys]


def _require_file(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file: {path}")
    return p


def _cmd_generate(args) -> int:
    values = _collect_values(args, _sectioned("dataset", DATASET_KEYS))
    try:
        params = phantom_from_values(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    counts = {k: values.get(f"dataset.{k}", d) for k, d in (("n_labeled", 10), ("n_unlabeled", 90), ("n_test", 30))}
    split = synthdata.generate_split(params, **counts)
    manifest = synthdata.write_dataset(args.out, split, params)
    print(manifest)
    return EXIT_OK


def _cmd_train(args) -> int:
    manifest = _require_file(args.manifest, "--manifest")
    keys = _sectioned("train", TRAIN_KEYS) + _sectioned("arch", ARCH_KEYS)
    values = _collect_values(args, keys)
    try:
        cfg = train_config_from_values(values, args.method)
        arch = arch_from_values(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    labeled = synthdata.load_cases(manifest, "labeled")
    if not labeled:
        raise UsageError(f"--manifest: {manifest} has no labeled cases")
    unlabeled = synthdata.load_cases(manifest, "unlabeled") if args.method != "supervised" else []
    lab = (synthdata.stack_images(labeled), synthdata.stack_masks(labeled))
    unl = synthdata.stack_images(unlabeled) if unlabeled else None
    state = None
    if args.resume:
        state, saved_cfg = trainers.load_state(_require_file(args.resume, "--resume"))
        if saved_cfg is not None and saved_cfg.digest() != cfg.digest():
            raise UsageError("--resume: checkpoint was trained with a different configuration")
        arch = state.models.architecture
    state = trainers.train(arch, cfg, lab, unl, state=state, until_epoch=args.until_epoch)
    trainers.save_state(args.checkpoint, state, cfg)
    print(f"{args.checkpoint}: {cfg.method} epoch {state.epoch}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    manifest = _require_file(args.manifest, "--manifest")
    cases = [c for c in synthdata.load_cases(manifest, args.split) if c.mask is not None]
    if not cases:
        raise UsageError(f"--manifest: no annotated cases in split {args.split!r}")
    spacing = cases[0].mask.spacing_mm
    if args.checkpoint:
        state, cfg = trainers.load_state(_require_file(args.checkpoint, "--checkpoint"))
        label, seed = state.method, (cfg.seed if cfg else 0)
        images = synthdata.stack_images(cases)
        preds = np.concatenate([trainers.predict(state, images[i:i + 8]).data > 0.5
                                for i in range(0, len(images), 8)])
        metrics = evaluate_predictions(preds, cases, spacing)
    else:
        pred_manifest = _require_file(args.predictions, "--predictions")
        root = pred_manifest.parent
        by_id = {e.id: e for e in synthdata.read_manifest(pred_manifest)}
        missing = [c.id for c in cases if c.id not in by_id or by_id[c.id].mask_path is None]
        if missing:
            raise UsageError(f"--predictions: no predicted mask for {missing[0]}")
        preds = np.stack([synthdata.read_mask(root / by_id[c.id].mask_path).voxels[None, 0] for c in cases])
        metrics = evaluate_predictions(preds, cases, spacing)
        label, seed = "predictions", 0
    spec = ExperimentSpec(name=f"evaluate-{label}", methods=(label,), seeds=(seed,))
    report = ExperimentReport(spec=spec, labeled_count=0, rows=[CaseRow(label, seed, m) for m in metrics],
                              thresholds_ml=(0.0,), complete=True)
    aggregate(report)
    render_report(report, args.out)
    print(Path(args.out) / "cases.csv")
    return EXIT_OK


def _experiment_spec(args) -> ExperimentSpec:
    keys = (_sectioned("dataset", DATASET_KEYS) + _sectioned("train", TRAIN_KEYS) + _sectioned("arch", ARCH_KEYS)
            + ["name", "output_dir", "seeds", "methods", "stratification_thresholds_ml", "ablation_labeled_counts"])
    values = _collect_values(args, keys)
    if args.seed is not None:
        values["seeds"] = (parse_value("seeds", args.seed)[0],)
    try:
        spec = spec_from_values(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if spec.output_dir is None:
        raise UsageError("--out is required (or output_dir in the config file)")
    return spec


def _cmd_experiment(args) -> int:
    spec = _experiment_spec(args)
    report = run_experiment(spec)
    print(Path(spec.output_dir) / "summary.txt")
    return EXIT_OK if report.complete else EXIT_RUNTIME


def _cmd_ablation(args) -> int:
    spec = _experiment_spec(args)
    if not spec.ablation_labeled_counts:
        raise UsageError("--ablation-labeled-counts is required (or ablation_labeled_counts in the config file)")
    run_ablation(spec)
    print(Path(spec.output_dir) / "ablation.csv")
    return EXIT_OK


COMMANDS = {"generate": _cmd_generate, "train": _cmd_train, "evaluate": _cmd_evaluate,
            "experiment": _cmd_experiment, "ablation": _cmd_ablation}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (synthdata.VolumeFormatError, CheckpointFormatError) as exc:
        print(f"error: bad input file: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ExperimentError as exc:
        print(f"error: experiment failed at {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level guard maps anything else to a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

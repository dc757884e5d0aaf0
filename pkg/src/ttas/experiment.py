"""Method comparison, labeled-set ablation and report assembly."""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import trainers
from .losses import TauSchedule
from .metrics import CaseMetrics, StratumSummary, case_metrics, stratified_dice
from .segnet import NetworkArchitecture, arch_to_dict
from .stats import DegenerateStatisticError, StatResult, icc, mean_ci, paired_t_test, pearson_r
from .synthdata import MaskVolume, PhantomParams, Split, generate_split, stack_images, stack_masks
from .trainers import TrainConfig

logger = logging.getLogger(__name__)

METRICS = ("dice", "precision", "asd_mm", "vol_pred_ml", "vol_gt_ml", "abvd_ml")
COMPARED_METRICS = ("dice", "precision", "asd_mm", "abvd_ml")


class ExperimentError(RuntimeError):
    def __init__(self, method: str, seed: int, stage: str, cause: BaseException):
        super().__init__(f"{method} / seed {seed} / {stage}: {type(cause).__name__}: {cause}")
        self.method, self.seed, self.stage = method, seed, stage


def default_train_configs() -> dict[str, TrainConfig]:
    # one shared epoch budget for every method, sized so the default
    # 5-seed comparison finishes in minutes on a single core
    return {m: TrainConfig(method=m, epochs=20, gamma=0.95) for m in trainers.METHODS}


@dataclass
class ExperimentSpec:
    name: str = "default"
    phantom: PhantomParams = field(default_factory=PhantomParams)
    n_labeled: int = 10
    n_unlabeled: int = 90
    n_test: int = 30
    methods: tuple[str, ...] = ("ttas", "ts", "supervised")
    train: dict[str, TrainConfig] = field(default_factory=default_train_configs)
    arch: NetworkArchitecture = field(default_factory=NetworkArchitecture)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    ablation_labeled_counts: tuple[int, ...] | None = None
    stratification_thresholds_ml: tuple[float, ...] | None = None
    output_dir: str | None = None

    def validate(self) -> None:
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be nonempty and distinct")
        unknown = set(self.methods) - set(trainers.METHODS)
        if unknown or not self.methods:
            raise ValueError(f"unknown or empty methods: {sorted(unknown)}")
        missing = [m for m in self.methods if m not in self.train]
        if missing:
            raise ValueError(f"no training config for {missing}")
        counts = self.ablation_labeled_counts
        if counts is not None:
            if any(b >= a for a, b in zip(counts, counts[1:])):
                raise ValueError("ablation_labeled_counts must be strictly decreasing")
            if counts and (counts[0] > self.n_labeled or counts[-1] < 1):
                raise ValueError(f"ablation counts must lie in [1, {self.n_labeled}]")
        self.arch.validate()

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "phantom": asdict(self.phantom),
            "split": [self.n_labeled, self.n_unlabeled, self.n_test],
            "methods": list(self.methods),
            "train": {m: self.train[m].to_dict() for m in self.methods if m in self.train},
            "arch": arch_to_dict(self.arch),
            "seeds": list(self.seeds),
            "ablation_labeled_counts": list(self.ablation_labeled_counts or ()),
            "stratification_thresholds_ml": list(self.stratification_thresholds_ml or ()),
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def phantom_from_values(values: Mapping[str, Any], base: PhantomParams | None = None) -> PhantomParams:
    ds = {k.split(".", 1)[1]: v for k, v in values.items()
          if k.startswith("dataset.") and k[8:] not in ("n_labeled", "n_unlabeled", "n_test")}
    return replace(base or PhantomParams(), **ds)


def arch_from_values(values: Mapping[str, Any]) -> NetworkArchitecture:
    vals = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("arch.")}
    return replace(NetworkArchitecture(), **vals)


def train_config_from_values(values: Mapping[str, Any], method: str,
                             base: TrainConfig | None = None) -> TrainConfig:
    """Defaults for ``method``, then shared ``train.*`` keys, then ``train.<method>.*``."""
    if base is None:
        base = default_train_configs()[method]
    shared = {k.split(".", 1)[1]: v for k, v in values.items()
              if k.startswith("train.") and k.count(".") == 1}
    own = {k.split(".", 2)[2]: v for k, v in values.items() if k.startswith(f"train.{method}.")}
    return _apply_train_values(replace(base, method=method), {**shared, **own})


def spec_from_values(values: Mapping[str, Any]) -> ExperimentSpec:
    """Build a spec from parsed config keys (see :mod:`ttas.config`)."""
    spec = ExperimentSpec(phantom=phantom_from_values(values), arch=arch_from_values(values))
    for key in ("n_labeled", "n_unlabeled", "n_test"):
        if f"dataset.{key}" in values:
            setattr(spec, key, values[f"dataset.{key}"])
    for key in ("name", "output_dir", "seeds", "methods", "ablation_labeled_counts",
                "stratification_thresholds_ml"):
        if key in values:
            setattr(spec, key, values[key])
    spec.train = {m: train_config_from_values(values, m) for m in default_train_configs()}
    spec.validate()
    return spec


def _apply_train_values(cfg: TrainConfig, vals: Mapping[str, Any]) -> TrainConfig:
    vals = dict(vals)
    tau = cfg.tau_schedule
    tau_kw = {}
    for src, dst in (("tau_kind", "kind"), ("tau_start", "tau_start"), ("tau_end", "tau_end")):
        if src in vals:
            tau_kw[dst] = vals.pop(src)
    if tau_kw:
        merged = {**asdict(tau), **tau_kw}
        if merged["kind"] == "constant" and "tau_end" not in tau_kw:
            merged["tau_end"] = merged["tau_start"]
        vals["tau_schedule"] = TauSchedule(**merged)
    return replace(cfg, **vals)


# report ----------------------------------------------------------------------

@dataclass(frozen=True)
class CaseRow:
    method: str
    seed: int
    metrics: CaseMetrics


@dataclass(frozen=True)
class MetricSummary:
    method: str
    metric: str
    n: int
    mean: float
    sd: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class ComparisonRow:
    test: str  # paired_t | pearson | icc
    metric: str
    method_a: str
    method_b: str
    result: StatResult | None


@dataclass
class ExperimentReport:
    spec: ExperimentSpec
    labeled_count: int
    rows: list[CaseRow] = field(default_factory=list)
    summary: list[MetricSummary] = field(default_factory=list)
    comparisons: list[ComparisonRow] = field(default_factory=list)
    stratified: dict[str, list[StratumSummary]] = field(default_factory=dict)
    thresholds_ml: tuple[float, ...] = ()
    durations: dict[str, float] = field(default_factory=dict)
    complete: bool = False

    def metric_values(self, method: str, metric: str) -> list[float]:
        vals = [getattr(r.metrics, metric) for r in self.rows if r.method == method]
        return [v for v in vals if v is not None]

    def mean(self, method: str, metric: str) -> float:
        return float(np.mean(self.metric_values(method, metric)))

    def paired(self, method_a: str, method_b: str, metric: str) -> tuple[list[float], list[float]]:
        a = {(r.seed, r.metrics.case_id): getattr(r.metrics, metric) for r in self.rows if r.method == method_a}
        b = {(r.seed, r.metrics.case_id): getattr(r.metrics, metric) for r in self.rows if r.method == method_b}
        keys = [k for k in a if k in b and a[k] is not None and b[k] is not None]
        return [a[k] for k in keys], [b[k] for k in keys]

    def comparison(self, test: str, metric: str, method_a: str, method_b: str = "") -> StatResult | None:
        for c in self.comparisons:
            if (c.test, c.metric, c.method_a, c.method_b) == (test, metric, method_a, method_b):
                return c.result
        raise KeyError((test, metric, method_a, method_b))


def aggregate(report: ExperimentReport) -> None:
    """Fill summary, comparisons and stratified tables from ``report.rows``."""
    methods = [m for m in report.spec.methods if any(r.method == m for r in report.rows)]
    report.summary = []
    for m in methods:
        for metric in METRICS:
            vals = report.metric_values(m, metric)
            if not vals:
                report.summary.append(MetricSummary(m, metric, 0, *(float("nan"),) * 4))
                continue
            mu, sd, lo, hi = mean_ci(vals)
            report.summary.append(MetricSummary(m, metric, len(vals), mu, sd, lo, hi))

    report.comparisons = []
    for a, b in itertools.combinations(methods, 2):
        for metric in COMPARED_METRICS:
            xa, xb = report.paired(a, b, metric)
            try:
                res = paired_t_test(xa, xb)
            except (DegenerateStatisticError, ValueError):
                res = None
            report.comparisons.append(ComparisonRow("paired_t", metric, a, b, res))
    for m in methods:
        rows = [r.metrics for r in report.rows if r.method == m]
        try:
            res = pearson_r([r.vol_gt_ml for r in rows], [r.dice for r in rows])
        except (DegenerateStatisticError, ValueError):
            res = None
        report.comparisons.append(ComparisonRow("pearson", "dice_vs_vol_gt_ml", m, "", res))
        try:
            value = icc([[r.vol_pred_ml, r.vol_gt_ml] for r in rows])
            res = StatResult(value, float("nan"), len(rows), {})
        except (DegenerateStatisticError, ValueError):
            res = None
        report.comparisons.append(ComparisonRow("icc", "vol_pred_vs_gt_ml", m, "", res))

    report.stratified = {
        m: stratified_dice([(r.metrics, r.metrics.vol_gt_ml) for r in report.rows if r.method == m],
                           report.thresholds_ml)
        for m in methods
    }


# running ---------------------------------------------------------------------

def _predict_masks(state: trainers.TrainState, images: np.ndarray, chunk: int = 8) -> np.ndarray:
    out = []
    for i in range(0, images.shape[0], chunk):
        out.append(trainers.predict(state, images[i:i + chunk]).data > 0.5)
    return np.concatenate(out)


def evaluate_predictions(pred_masks: np.ndarray, test_cases, spacing) -> list[CaseMetrics]:
    rows = []
    for pm, case in zip(pred_masks, test_cases):
        pred = MaskVolume.from_array(pm[0].astype(np.uint8), spacing)
        rows.append(case_metrics(case.id, pred, case.mask))
    return rows


def default_thresholds(spec: ExperimentSpec, split: Split) -> tuple[float, ...]:
    if spec.stratification_thresholds_ml is not None:
        return tuple(spec.stratification_thresholds_ml)
    return (0.0, *split.stratum_bounds_ml)


def run_experiment(spec: ExperimentSpec, labeled_count: int | None = None,
                   output_dir: str | Path | None = None) -> ExperimentReport:
    """Train every method for every seed and evaluate on the shared test set.

    ``labeled_count`` truncates the labeled split (the unlabeled pool is
    unchanged). Outputs are written when ``output_dir`` (or ``spec.output_dir``) is set.
    """
    spec.validate()
    n_lab = spec.n_labeled if labeled_count is None else labeled_count
    report = ExperimentReport(spec=spec, labeled_count=n_lab)
    out = output_dir if output_dir is not None else spec.output_dir
    t_start = time.perf_counter()
    try:
        for seed in spec.seeds:
            method, stage = "-", "generate"
            try:
                split = generate_split(replace(spec.phantom, seed=seed), spec.n_labeled, spec.n_unlabeled, spec.n_test)
                if not report.thresholds_ml:
                    report.thresholds_ml = default_thresholds(spec, split)
                labeled = split.labeled[:n_lab]
                lab_data = (stack_images(labeled), stack_masks(labeled)) if labeled else (np.zeros((0, 1, 1, 1)),) * 2
                unl_data = stack_images(split.unlabeled)
                test_images = stack_images(split.test)
                for method in spec.methods:
                    stage = "train"
                    t0 = time.perf_counter()
                    cfg = replace(spec.train[method], method=method, seed=seed)
                    state = trainers.train(spec.arch, cfg, lab_data, unl_data if method != "supervised" else None)
                    stage = "evaluate"
                    preds = _predict_masks(state, test_images)
                    for cm in evaluate_predictions(preds, split.test, spec.phantom.spacing_mm):
                        report.rows.append(CaseRow(method, seed, cm))
                    report.durations[f"{method}/{seed}"] = time.perf_counter() - t0
                    logger.info("%s seed %d done in %.1fs", method, seed, report.durations[f"{method}/{seed}"])
            except Exception as exc:
                raise ExperimentError(method, seed, stage, exc) from exc
        report.complete = True
    finally:
        report.durations["total"] = time.perf_counter() - t_start
        aggregate(report)
        if out is not None:
            from .report import render_report
            render_report(report, out)
    return report


def run_ablation(spec: ExperimentSpec, output_dir: str | Path | None = None,
                 reuse: Mapping[int, ExperimentReport] | None = None) -> dict[int, ExperimentReport]:
    """Repeat :func:`run_experiment` for each labeled count, same seeds and test sets."""
    counts = spec.ablation_labeled_counts
    if not counts:
        raise ValueError("spec has no ablation_labeled_counts")
    spec.validate()
    out = output_dir if output_dir is not None else spec.output_dir
    reports: dict[int, ExperimentReport] = {}
    for count in counts:
        if reuse and count in reuse:
            reports[count] = reuse[count]
            continue
        sub = None if out is None else Path(out) / f"labeled_{count}"
        reports[count] = run_experiment(spec, labeled_count=count, output_dir=sub)
    if out is not None:
        from .report import write_ablation_table
        write_ablation_table(reports, out)
    return reports


__all__ = [
    "ExperimentSpec", "ExperimentReport", "ExperimentError", "CaseRow", "MetricSummary", "ComparisonRow",
    "run_experiment", "run_ablation", "aggregate", "spec_from_values", "default_train_configs",
    "phantom_from_values", "arch_from_values", "train_config_from_values",
    "evaluate_predictions", "METRICS", "COMPARED_METRICS",
]

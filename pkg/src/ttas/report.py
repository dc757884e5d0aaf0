"""CSV and plain-text rendering of experiment reports.

Numbers are written with 6 significant digits and missing values as empty
fields. Wall-clock durations only appear in ``summary.txt`` and ``run.json``
so the CSV files are byte-identical across identical runs.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Mapping

from .experiment import METRICS, ExperimentReport

CASES_HEADER = ("case_id", "method", "seed", "dice", "precision", "asd_mm", "vol_pred_ml", "vol_gt_ml", "abvd_ml")
SUMMARY_HEADER = ("method", "metric", "n", "mean", "sd", "ci_low", "ci_high")
STRATIFIED_HEADER = ("method", "threshold_ml", "n", "mean", "sd", "median", "q1", "q3", "iqr")
STATS_HEADER = ("test", "metric", "method_a", "method_b", "n", "statistic", "df", "p_value")
INCOMPLETE_MARKER = "INCOMPLETE"


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    value = float(value)
    if math.isnan(value):
        return ""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return format(value, ".6g")


def _csv_text(header: Iterable[str], rows: Iterable[Iterable]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return buf.getvalue()


def cases_csv(report: ExperimentReport) -> str:
    order = {m: i for i, m in enumerate(report.spec.methods)}
    rows = sorted(report.rows, key=lambda r: (order[r.method], r.seed, r.metrics.case_id))
    return _csv_text(CASES_HEADER, (
        (r.metrics.case_id, r.method, r.seed, *(getattr(r.metrics, m) for m in METRICS)) for r in rows
    ))


def summary_csv(report: ExperimentReport) -> str:
    return _csv_text(SUMMARY_HEADER, (
        (s.method, s.metric, s.n, s.mean, s.sd, s.ci_low, s.ci_high) for s in report.summary
    ))


def stratified_csv(report: ExperimentReport) -> str:
    rows = []
    for method, strata in report.stratified.items():
        for s in strata:
            rows.append((method, s.threshold_ml, s.n, s.mean, s.sd, s.median, s.q1, s.q3, s.iqr))
    return _csv_text(STRATIFIED_HEADER, rows)


def stats_csv(report: ExperimentReport) -> str:
    rows = []
    for c in report.comparisons:
        r = c.result
        if r is None:
            rows.append((c.test, c.metric, c.method_a, c.method_b, "", None, None, None))
        else:
            rows.append((c.test, c.metric, c.method_a, c.method_b, r.n, r.statistic, r.detail.get("df"), r.p_value))
    return _csv_text(STATS_HEADER, rows)


def summary_text(report: ExperimentReport) -> str:
    lines = [
        f"experiment: {report.spec.name}",
        f"config hash: {report.spec.digest()}",
        f"labeled cases: {report.labeled_count}",
        f"seeds: {', '.join(map(str, report.spec.seeds))}",
        f"status: {'complete' if report.complete else 'INCOMPLETE'}",
        "",
        f"{'method':<12}{'dice':>10}{'precision':>11}{'asd_mm':>10}{'abvd_ml':>10}",
    ]
    by_key = {(s.method, s.metric): s for s in report.summary}
    for m in report.spec.methods:
        if (m, "dice") not in by_key:
            continue
        vals = [fmt(by_key[(m, k)].mean) for k in ("dice", "precision", "asd_mm", "abvd_ml")]
        lines.append(f"{m:<12}{vals[0]:>10}{vals[1]:>11}{vals[2]:>10}{vals[3]:>10}")
    sig = [c for c in report.comparisons if c.test == "paired_t" and c.metric == "dice" and c.result is not None]
    if sig:
        lines.append("")
        lines.append("paired t-test on dice:")
        for c in sig:
            lines.append(f"  {c.method_a} vs {c.method_b}: t = {fmt(c.result.statistic)}, p = {fmt(c.result.p_value)}")
    lines.append("")
    lines.append("durations (s):")
    for key, sec in report.durations.items():
        lines.append(f"  {key}: {sec:.1f}")
    return "\n".join(lines) + "\n"


def render_report(report: ExperimentReport, output_dir) -> Path:
    """Write all report files into ``output_dir`` and return it."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "cases.csv": cases_csv(report),
        "summary.csv": summary_csv(report),
        "stratified.csv": stratified_csv(report),
        "stats.csv": stats_csv(report),
        "summary.txt": summary_text(report),
    }
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")
    meta = {
        "name": report.spec.name,
        "config_hash": report.spec.digest(),
        "spec": report.spec.to_dict(),
        "labeled_count": report.labeled_count,
        "complete": report.complete,
        "durations_s": report.durations,
    }
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    marker = out / INCOMPLETE_MARKER
    if report.complete:
        if marker.exists():
            marker.unlink()
    else:
        marker.write_text("run aborted before all (method, seed) pairs finished\n", encoding="utf-8")
    return out


def write_ablation_table(reports: Mapping[int, ExperimentReport], output_dir) -> Path:
    """count x method table of mean Dice, written as ``ablation.csv``."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = list(reports)
    methods = list(reports[counts[0]].spec.methods)
    rows = [(c, *(reports[c].mean(m, "dice") for m in methods)) for c in counts]
    path = out / "ablation.csv"
    path.write_text(_csv_text(("labeled_count", *methods), rows), encoding="utf-8")
    return path


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


__all__ = [
    "render_report", "write_ablation_table", "read_csv", "fmt", "cases_csv", "summary_csv",
    "stratified_csv", "stats_csv", "summary_text", "CASES_HEADER", "SUMMARY_HEADER",
    "STRATIFIED_HEADER", "STATS_HEADER", "INCOMPLETE_MARKER",
]

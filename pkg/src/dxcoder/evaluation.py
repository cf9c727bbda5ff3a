"""Support-weighted multi-label metrics, exact match, and small-sample
confidence intervals.

Per class: TP/FP/FN from set membership, precision TP/(TP+FP), recall
TP/(TP+FN), F1 their harmonic mean, with 0/0 defined as 0. The weighted
aggregate weights each class by its support in the evaluated targets, so
classes absent from the targets carry zero weight. Exact match is the
fraction of records whose predicted and target sets are equal. Values are
kept at full precision; rounding to two decimals happens only when a report
is serialized.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from scipy import stats


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ClassMetrics:
    code: str
    support: int
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class EvalReport:
    """Weighted metrics are percentages at full float precision."""

    per_class: tuple[ClassMetrics, ...]
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    exact_match: float
    n_records: int
    n_classes: int


@dataclass(frozen=True)
class ConfidenceInterval:
    mean: float
    half_width: float
    n_runs: int
    t_quantile: float


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def evaluate(
    targets: Sequence[frozenset | set],
    predictions: Sequence[frozenset | set],
    inventory: Sequence[str],
) -> EvalReport:
    if len(targets) != len(predictions):
        raise EvaluationError(
            f"got {len(targets)} target sets but {len(predictions)} prediction sets"
        )
    known = set(inventory)
    tp: dict[str, int] = {c: 0 for c in inventory}
    fp: dict[str, int] = {c: 0 for c in inventory}
    fn: dict[str, int] = {c: 0 for c in inventory}
    exact = 0
    for t, p in zip(targets, predictions):
        stray = (set(t) | set(p)) - known
        if stray:
            raise EvaluationError(f"codes outside the inventory: {sorted(stray)[:5]}")
        if set(t) == set(p):
            exact += 1
        for c in set(t) & set(p):
            tp[c] += 1
        for c in set(p) - set(t):
            fp[c] += 1
        for c in set(t) - set(p):
            fn[c] += 1

    per_class = []
    for code in sorted(inventory):
        precision = _ratio(tp[code], tp[code] + fp[code])
        recall = _ratio(tp[code], tp[code] + fn[code])
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class.append(
            ClassMetrics(
                code=code,
                support=tp[code] + fn[code],
                tp=tp[code],
                fp=fp[code],
                fn=fn[code],
                precision=precision,
                recall=recall,
                f1=f1,
            )
        )

    total_support = sum(m.support for m in per_class)
    if total_support:
        wp = sum(m.support * m.precision for m in per_class) / total_support
        wr = sum(m.support * m.recall for m in per_class) / total_support
        wf = sum(m.support * m.f1 for m in per_class) / total_support
    else:
        wp = wr = wf = 0.0
    return EvalReport(
        per_class=tuple(per_class),
        weighted_precision=100.0 * wp,
        weighted_recall=100.0 * wr,
        weighted_f1=100.0 * wf,
        exact_match=100.0 * _ratio(exact, len(targets)),
        n_records=len(targets),
        n_classes=len(inventory),
    )


def exact_match(
    targets: Sequence[frozenset | set], predictions: Sequence[frozenset | set]
) -> float:
    """Percent of records whose predicted set equals the target set."""
    if len(targets) != len(predictions):
        raise EvaluationError(
            f"got {len(targets)} target sets but {len(predictions)} prediction sets"
        )
    if not targets:
        return 0.0
    hits = sum(1 for t, p in zip(targets, predictions) if set(t) == set(p))
    return 100.0 * hits / len(targets)


def confidence_interval(values: Sequence[float], level: float = 0.95) -> ConfidenceInterval:
    """mean ± t_{(1+level)/2, n-1} * sigma / sqrt(n) with the sample (n-1)
    standard deviation; three runs at 95% use t = 4.302653."""
    n = len(values)
    if n < 2:
        raise EvaluationError(f"need at least 2 values, got {n}")
    if not (0.0 < level < 1.0):
        raise EvaluationError(f"level must be in (0, 1), got {level!r}")
    mean = sum(values) / n
    variance = sum((v - mean) ** 2 for v in values) / (n - 1)
    sigma = math.sqrt(variance)
    quantile = float(stats.t.ppf((1 + level) / 2, n - 1))
    return ConfidenceInterval(
        mean=mean,
        half_width=quantile * sigma / math.sqrt(n),
        n_runs=n,
        t_quantile=quantile,
    )


# --- serialization -----------------------------------------------------------


def report_to_json(report: EvalReport) -> str:
    obj = {
        "n_records": report.n_records,
        "n_classes": report.n_classes,
        "weighted_precision": round(report.weighted_precision, 2),
        "weighted_recall": round(report.weighted_recall, 2),
        "weighted_f1": round(report.weighted_f1, 2),
        "exact_match": round(report.exact_match, 2),
    }
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["code", "support", "tp", "fp", "fn", "precision", "recall", "f1"])
    for m in report.per_class:
        writer.writerow(
            [
                m.code,
                m.support,
                m.tp,
                m.fp,
                m.fn,
                f"{m.precision:.6f}",
                f"{m.recall:.6f}",
                f"{m.f1:.6f}",
            ]
        )
    return buf.getvalue()


def save_report(report: EvalReport, json_path: str | Path, csv_path: str | Path) -> None:
    Path(json_path).write_text(report_to_json(report), encoding="utf-8")
    Path(csv_path).write_text(report_to_csv(report), encoding="utf-8")

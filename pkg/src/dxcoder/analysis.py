"""Performance studies over trained models: class F1 against code frequency
and hierarchy depth, training-volume sweep, input-field permutations, a
frozen-backbone comparison, and per-category aggregation. Each study yields
an AnalysisTable that serializes to CSV plus a JSON provenance sidecar, and
every table is a deterministic function of (corpus id, seeds, config hash).

Scale conventions: per-class columns (f1, mean_f1) are fractions in [0, 1];
weighted_* and exact_match columns are percentages, matching the headline
report fields.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Corpus, build_input, corpus_digest
from .evaluation import EvalReport, confidence_interval
from .model import ModelConfig, init
from .pipeline import EncodedSplit, build_dataset, evaluate_model
from .splitter import SplitPlan, subset_training
from .terminology import CATEGORY_PRIORITY, ConceptGraph, categorize, depth
from .tokenizer import build_vocab, corpus_stats, encode
from .trainer import TrainConfig, train


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class AnalysisTable:
    """Rectangular named-column table with provenance metadata."""

    name: str
    columns: tuple[str, ...]
    rows: tuple[tuple, ...]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(set(self.columns)) != len(self.columns):
            raise AnalysisError(f"duplicate column names in {self.columns}")
        for row in self.rows:
            if len(row) != len(self.columns):
                raise AnalysisError(
                    f"row width {len(row)} does not match {len(self.columns)} columns"
                )

    def column(self, name: str) -> list:
        try:
            i = self.columns.index(name)
        except ValueError:
            raise AnalysisError(f"no column {name!r} in {self.columns}") from None
        return [row[i] for row in self.rows]


def config_hash(model: ModelConfig, train: TrainConfig) -> str:
    blob = json.dumps({"model": asdict(model), "train": asdict(train)}, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def make_provenance(
    corpus: Corpus | None = None,
    model: ModelConfig | None = None,
    train: TrainConfig | None = None,
    seeds: Sequence[int] | None = None,
    **extra,
) -> dict:
    out: dict = {}
    if corpus is not None:
        out["corpus_id"] = corpus_digest(corpus)
    if model is not None and train is not None:
        out["config_hash"] = config_hash(model, train)
    if seeds is not None:
        out["seeds"] = [int(s) for s in seeds]
    out.update(extra)
    return out


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".6f")
    return str(value)


def table_to_csv(table: AnalysisTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(table.columns)
    for row in table.rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def provenance_to_json(table: AnalysisTable) -> str:
    obj = {"study": table.name, **table.provenance}
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def save_table(
    table: AnalysisTable, csv_path: str | Path, provenance_path: str | Path | None = None
) -> None:
    csv_path = Path(csv_path)
    if provenance_path is None:
        provenance_path = csv_path.with_suffix(".provenance.json")
    csv_path.write_text(table_to_csv(table), encoding="utf-8")
    Path(provenance_path).write_text(provenance_to_json(table), encoding="utf-8")


def pearson_r(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    """Sample correlation; None when undefined (fewer than 2 points or a
    zero-variance axis)."""
    if len(xs) != len(ys):
        raise AnalysisError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        return None
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float((xc**2).sum()) * float((yc**2).sum()))
    if denom == 0.0:
        return None
    return float((xc * yc).sum() / denom)


# --- report-driven studies ----------------------------------------------------


def frequency_study(
    corpus: Corpus, report: EvalReport, provenance: dict | None = None
) -> tuple[AnalysisTable, float | None]:
    """Rows (code, ln frequency, class F1) for classes with test support,
    where frequency counts records carrying the code over the full labeled
    corpus; plus the Pearson correlation of ln frequency with F1."""
    counts: dict[str, int] = {}
    for record in corpus.records:
        for code in record.codes:
            counts[code] = counts.get(code, 0) + 1
    rows = []
    for m in report.per_class:
        if m.support == 0:
            continue
        count = counts.get(m.code, 0)
        if count == 0:
            raise AnalysisError(
                f"code {m.code} has test support but never occurs in the corpus"
            )
        rows.append((m.code, math.log(count), m.f1))
    r = pearson_r([row[1] for row in rows], [row[2] for row in rows])
    table = AnalysisTable(
        name="frequency",
        columns=("code", "ln_frequency", "f1"),
        rows=tuple(rows),
        provenance={**(provenance or {}), "pearson_r": r, "n_classes": len(rows)},
    )
    return table, r


def depth_study(
    graph: ConceptGraph, report: EvalReport, provenance: dict | None = None
) -> AnalysisTable:
    """Per-depth mean class F1 with a 95% interval over the codes at that
    depth (missing when fewer than 2 codes). Codes without a hierarchy
    position (absent or unreachable from the root) are excluded and counted."""
    by_depth: dict[int, list[float]] = {}
    excluded = 0
    represented = 0
    for m in report.per_class:
        if m.support == 0:
            continue
        d = depth(graph, m.code) if m.code in graph.concepts else None
        if d is None:
            excluded += 1
            continue
        represented += 1
        by_depth.setdefault(d, []).append(m.f1)
    rows = []
    for d in sorted(by_depth):
        values = by_depth[d]
        if len(values) >= 2:
            interval = confidence_interval(values, level=0.95)
            mean, half = interval.mean, interval.half_width
        else:
            mean, half = values[0], None
        rows.append((d, mean, half, len(values)))
    return AnalysisTable(
        name="depth",
        columns=("depth", "mean_f1", "ci_half_width", "n_codes"),
        rows=tuple(rows),
        provenance={
            **(provenance or {}),
            "excluded_codes": excluded,
            "represented_codes": represented,
        },
    )


def category_study(
    graph: ConceptGraph, report: EvalReport, provenance: dict | None = None
) -> AnalysisTable:
    """Support-weighted precision/recall/F1 summed per disease category over
    member classes (test support > 0). Categories with no members are
    omitted. The category rows repartition the overall weighted metrics."""
    members: dict[str, list] = {}
    missing = sorted(
        m.code for m in report.per_class if m.support > 0 and m.code not in graph.concepts
    )
    if missing:
        raise AnalysisError(f"codes absent from the concept graph: {missing[:5]}")
    for m in report.per_class:
        if m.support == 0:
            continue
        members.setdefault(categorize(graph, m.code), []).append(m)
    rows = []
    for category in CATEGORY_PRIORITY:
        group = members.get(category)
        if not group:
            continue
        support = sum(m.support for m in group)
        wp = 100.0 * sum(m.support * m.precision for m in group) / support
        wr = 100.0 * sum(m.support * m.recall for m in group) / support
        wf = 100.0 * sum(m.support * m.f1 for m in group) / support
        rows.append((category, support, len(group), wp, wr, wf))
    return AnalysisTable(
        name="categories",
        columns=(
            "category", "support", "n_classes",
            "weighted_precision", "weighted_recall", "weighted_f1",
        ),
        rows=tuple(rows),
        provenance=dict(provenance or {}),
    )


# --- training-based studies -----------------------------------------------------


def _train_cell(
    corpus: Corpus,
    plan: SplitPlan,
    fields: tuple[str, ...],
    model_template: ModelConfig,
    train_config: TrainConfig,
    keep_train_ids: set[str] | None = None,
    frozen: bool = False,
) -> tuple[EvalReport, float, float]:
    """One study cell: build the vocabulary from the (possibly subset) train
    texts, train a fresh model, and evaluate on the test split. Returns the
    report plus mean token count and truncation rate over the whole corpus."""
    train_ids = set(plan.ids("train"))
    if keep_train_ids is not None:
        train_ids &= keep_train_ids
    train_texts = [
        build_input(r, fields) for r in corpus.records if r.record_id in train_ids
    ]
    vocab = build_vocab(train_texts, max_len=model_template.max_len)
    model_config = replace(
        model_template,
        vocab_size=vocab.size,
        n_classes=corpus.n_codes,
        backbone_frozen=frozen,
    )
    splits = build_dataset(corpus, plan, vocab, fields=fields)
    train_split = splits["train"]
    if keep_train_ids is not None:
        by_id = {r.record_id: r for r in corpus.records}
        keep_rows = [i for i, rid in enumerate(train_split.record_ids) if rid in train_ids]
        train_split = EncodedSplit(
            name="train",
            record_ids=[train_split.record_ids[i] for i in keep_rows],
            sequences=[train_split.sequences[i] for i in keep_rows],
            targets=train_split.targets[keep_rows],
            codes=train_split.codes,
            n_truncated=sum(
                encode(vocab, build_input(by_id[train_split.record_ids[i]], fields))[1]
                for i in keep_rows
            ),
        )
    state = init(model_config, seed=train_config.seed)
    best, _log = train(state, train_split, splits["validation"], train_config)
    report = evaluate_model(best, splits["test"], train_config.threshold)
    mean_tokens, truncation_rate, _unknown = corpus_stats(
        vocab, [build_input(r, fields) for r in corpus.records]
    )
    return report, mean_tokens, truncation_rate


_METRIC_COLUMNS = ("weighted_f1", "weighted_precision", "weighted_recall", "exact_match")


def _metric_cells(report: EvalReport) -> tuple[float, float, float, float]:
    return (
        report.weighted_f1,
        report.weighted_precision,
        report.weighted_recall,
        report.exact_match,
    )


def volume_sweep(
    corpus: Corpus,
    plan: SplitPlan,
    fractions: Sequence[float],
    model_template: ModelConfig,
    train_config: TrainConfig,
    fields: tuple[str, ...] = ("diagnosis", "assessment"),
    csv_path: str | Path | None = None,
) -> AnalysisTable:
    """Retrain from scratch on stratified subsets of the train split and
    evaluate each model on the same test set. When csv_path is given the
    partial table is persisted after every fraction, so an aborted sweep
    leaves the completed rows behind."""
    fractions = list(fractions)
    if not fractions:
        raise AnalysisError("need at least one fraction")
    if 1.0 not in fractions:
        raise AnalysisError("fractions must include 1.0 as the full-data baseline")
    if any(not (0.0 < f <= 1.0) for f in fractions):
        raise AnalysisError(f"fractions must lie in (0, 1]: {fractions}")
    provenance = make_provenance(
        corpus, model_template, train_config, [train_config.seed],
        fields=list(fields), fractions=[float(f) for f in fractions],
    )

    rows: list[tuple] = []

    def persist() -> AnalysisTable:
        table = AnalysisTable(
            name="volume",
            columns=("fraction",) + _METRIC_COLUMNS,
            rows=tuple(rows),
            provenance=provenance,
        )
        if csv_path is not None:
            save_table(table, csv_path)
        return table

    for fraction in fractions:
        try:
            keep = subset_training(corpus, plan, float(fraction), seed=train_config.seed)
            report, _, _ = _train_cell(
                corpus, plan, fields, model_template, train_config, keep_train_ids=keep
            )
        except Exception:
            persist()
            raise
        rows.append((float(fraction),) + _metric_cells(report))
        persist()
    return persist()


def field_study(
    corpus: Corpus,
    plan: SplitPlan,
    permutations: Sequence[tuple[str, ...]],
    model_template: ModelConfig,
    train_config: TrainConfig,
) -> AnalysisTable:
    """Train one model per input-field permutation; report test metrics plus
    the tokenizer's mean token count and truncation rate per permutation."""
    if not permutations:
        raise AnalysisError("need at least one field permutation")
    rows = []
    for fields in permutations:
        report, mean_tokens, truncation_rate = _train_cell(
            corpus, plan, tuple(fields), model_template, train_config
        )
        rows.append(
            ("+".join(fields),) + _metric_cells(report) + (mean_tokens, truncation_rate)
        )
    return AnalysisTable(
        name="fields",
        columns=("fields",) + _METRIC_COLUMNS + ("mean_tokens", "truncation_rate"),
        rows=tuple(rows),
        provenance=make_provenance(
            corpus, model_template, train_config, [train_config.seed],
            permutations=["+".join(p) for p in permutations],
        ),
    )


def frozen_comparison(
    corpus: Corpus,
    plan: SplitPlan,
    model_template: ModelConfig,
    train_config: TrainConfig,
    fields: tuple[str, ...] = ("diagnosis", "assessment"),
) -> AnalysisTable:
    """Paired rows for full fine-tuning versus a frozen backbone where only
    the pooler and classifier update; identical seeds and splits per mode."""
    rows = []
    for mode, frozen in (("fine_tuned", False), ("frozen", True)):
        report, _, _ = _train_cell(
            corpus, plan, fields, model_template, train_config, frozen=frozen
        )
        rows.append((mode,) + _metric_cells(report))
    return AnalysisTable(
        name="frozen",
        columns=("mode",) + _METRIC_COLUMNS,
        rows=tuple(rows),
        provenance=make_provenance(
            corpus, model_template, train_config, [train_config.seed], fields=list(fields)
        ),
    )

"""Stratified multi-label partitioning: 80/10/10 corpus splits and
stratified subsampling of the training split for volume sweeps.

Assignment runs in two phases. First, iterative stratification: repeatedly
take the label with the fewest remaining unassigned records and deal its
records to the split with the greatest remaining demand for that label,
tie-broken by remaining overall capacity and then by a seeded pick from a
64-bit linear congruential generator. Second, a deterministic rebalancing
pass: greedy dealing alone can leave a well-supported label off its
per-split quota by more than one record (records consumed during rarer
labels' turns never consult this label's demand), so single-record moves,
or size-preserving swaps when exact bin sizes are required, are applied
while they strictly reduce the total quota violation. Both phases are pure
functions of (items, fractions, seed), so plans are reproducible.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import SPLIT_NAMES, ClinicalRecord, Corpus


class SplitterError(ValueError):
    pass


class SeededLcg:
    """64-bit LCG with fixed constants; `pick` is the documented tie-break."""

    MULTIPLIER = 6364136223846793005
    INCREMENT = 1442695040888963407
    _MASK = (1 << 64) - 1

    def __init__(self, seed: int) -> None:
        self.state = seed & self._MASK

    def next(self) -> int:
        self.state = (self.MULTIPLIER * self.state + self.INCREMENT) & self._MASK
        return self.state

    def pick(self, k: int) -> int:
        return self.next() % k


@dataclass(frozen=True)
class SplitPlan:
    fractions: tuple[float, float, float]
    seed: int
    assignment: dict[str, str]

    def __post_init__(self) -> None:
        _check_fractions(self.fractions)
        for rid, split in self.assignment.items():
            if split not in SPLIT_NAMES:
                raise SplitterError(f"record {rid!r} assigned to unknown split {split!r}")

    def ids(self, split: str) -> list[str]:
        if split not in SPLIT_NAMES:
            raise SplitterError(f"unknown split {split!r}")
        return [rid for rid, s in self.assignment.items() if s == split]


def _check_fractions(fractions: Sequence[float]) -> None:
    if len(fractions) != len(SPLIT_NAMES):
        raise SplitterError(f"need {len(SPLIT_NAMES)} fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions):
        raise SplitterError("fractions must be nonnegative")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitterError(f"fractions must sum to 1, got {sum(fractions)!r}")


_EPS = 1e-9


def _quota_violation(count: int, frac: float, support: int) -> float:
    """How far a per-split label count sits outside its ±1 tolerance band."""
    return max(0.0, abs(count - frac * support) - 1.0 - _EPS)


class _Dealer:
    """Mutable assignment state shared by the dealing and rebalancing phases."""

    def __init__(self, items, names, fractions, lcg, capacities):
        self.items = items
        self.names = tuple(names)
        self.fractions = {s: fractions[i] for i, s in enumerate(names)}
        self.lcg = lcg
        self.capacities = capacities
        self.n = len(items)
        self.codes_of = dict(items)
        self.support = Counter()
        self.by_label: dict[str, list[str]] = {}
        for rid, codes in items:
            for code in codes:
                self.support[code] += 1
                self.by_label.setdefault(code, []).append(rid)
        self.assigned: dict[str, str] = {}
        self.label_counts = {s: Counter() for s in self.names}
        self.totals = {s: 0 for s in self.names}

    def remaining_capacity(self, s: str) -> float:
        if self.capacities is not None:
            return self.capacities[s] - self.totals[s]
        return self.fractions[s] * self.n - self.totals[s]

    def eligible(self) -> list[str]:
        if self.capacities is None:
            return list(self.names)
        open_bins = [s for s in self.names if self.totals[s] < self.capacities[s]]
        return open_bins or list(self.names)

    def place(self, rid: str, label: str | None) -> None:
        cands = self.eligible()
        if label is not None:
            demand = {
                s: self.fractions[s] * self.support[label] - self.label_counts[s][label]
                for s in cands
            }
            best = max(demand.values())
            cands = [s for s in cands if demand[s] == best]
        if len(cands) > 1:
            caps = {s: self.remaining_capacity(s) for s in cands}
            best_cap = max(caps.values())
            cands = [s for s in cands if caps[s] == best_cap]
        split = cands[0] if len(cands) == 1 else cands[self.lcg.pick(len(cands))]
        self.assigned[rid] = split
        self.totals[split] += 1
        for code in self.codes_of[rid]:
            self.label_counts[split][code] += 1

    def deal(self) -> None:
        while True:
            best_label = None
            best_key = None
            best_remaining: list[str] = []
            for label in sorted(self.by_label):
                remaining = [r for r in self.by_label[label] if r not in self.assigned]
                if not remaining:
                    continue
                key = (len(remaining), label)
                if best_key is None or key < best_key:
                    best_key, best_label, best_remaining = key, label, remaining
            if best_label is None:
                break
            for rid in best_remaining:
                self.place(rid, best_label)
        for rid, _codes in self.items:
            if rid not in self.assigned:
                self.place(rid, None)

    # --- rebalancing ---------------------------------------------------

    def _violation(self, s: str, label: str) -> float:
        return _quota_violation(
            self.label_counts[s][label], self.fractions[s], self.support[label]
        )

    def _delta_counts(self, rid: str, src: str, dst: str, sign: int = 1) -> float:
        d = 0.0
        for label in self.codes_of[rid]:
            d -= self._violation(src, label) + self._violation(dst, label)
            d += _quota_violation(
                self.label_counts[src][label] - sign, self.fractions[src], self.support[label]
            )
            d += _quota_violation(
                self.label_counts[dst][label] + sign, self.fractions[dst], self.support[label]
            )
        return d

    def _apply_move(self, rid: str, dst: str) -> None:
        src = self.assigned[rid]
        self.assigned[rid] = dst
        self.totals[src] -= 1
        self.totals[dst] += 1
        for label in self.codes_of[rid]:
            self.label_counts[src][label] -= 1
            self.label_counts[dst][label] += 1

    def _swap_delta(self, r1: str, r2: str) -> float:
        src, dst = self.assigned[r1], self.assigned[r2]
        d = 0.0
        # shared labels cancel: one leaves as the other arrives
        for label in self.codes_of[r1] ^ self.codes_of[r2]:
            step = -1 if label in self.codes_of[r1] else 1
            d -= self._violation(src, label) + self._violation(dst, label)
            d += _quota_violation(
                self.label_counts[src][label] + step, self.fractions[src], self.support[label]
            )
            d += _quota_violation(
                self.label_counts[dst][label] - step, self.fractions[dst], self.support[label]
            )
        return d

    def _improving_move(self, movers: list[str], size_slack: int):
        for r in movers:
            src = self.assigned[r]
            for dst in self.names:
                if dst == src:
                    continue
                if abs(self.totals[src] - 1 - self.fractions[src] * self.n) > size_slack + _EPS:
                    continue
                if abs(self.totals[dst] + 1 - self.fractions[dst] * self.n) > size_slack + _EPS:
                    continue
                if self._delta_counts(r, src, dst) < -1e-12:
                    return r, dst
        return None

    def _improving_swap(self, movers: list[str], order: list[str]):
        for r1 in movers:
            src = self.assigned[r1]
            for r2 in order:
                if self.assigned[r2] == src:
                    continue
                if self.codes_of[r1] == self.codes_of[r2]:
                    continue
                if self._swap_delta(r1, r2) < -1e-12:
                    return r1, r2
        return None

    def rebalance(self) -> None:
        # first-improvement hill climb: any strictly improving operation is
        # applied immediately, so only the final (failed) scan pays the full
        # candidate enumeration cost
        size_slack = max(1, len(self.support))
        order = [rid for rid, _ in self.items]
        for _ in range(4 * self.n + 8):
            violated_labels = {
                label
                for label in self.support
                for s in self.names
                if self._violation(s, label) > 0
            }
            if not violated_labels:
                return
            movers = [r for r in order if self.codes_of[r] & violated_labels]
            if self.capacities is None:
                move = self._improving_move(movers, size_slack)
                if move is not None:
                    self._apply_move(*move)
                    continue
            swap = self._improving_swap(movers, order)
            if swap is None:
                return
            r1, r2 = swap
            src, dst = self.assigned[r1], self.assigned[r2]
            self._apply_move(r1, dst)
            self._apply_move(r2, src)


def _stratify(
    items: Sequence[tuple[str, frozenset]],
    names: Sequence[str],
    fractions: Sequence[float],
    lcg: SeededLcg,
    capacities: Mapping[str, int] | None = None,
) -> dict[str, str]:
    dealer = _Dealer(items, names, fractions, lcg, capacities)
    dealer.deal()
    dealer.rebalance()
    return dealer.assigned


def stratified_split(
    corpus: Corpus,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> SplitPlan:
    _check_fractions(fractions)
    if len(corpus) == 0:
        raise SplitterError("cannot split an empty corpus")
    items = [(r.record_id, r.codes) for r in corpus.records]
    assignment = _stratify(items, SPLIT_NAMES, fractions, SeededLcg(seed))
    # reorder to corpus order so persisted plans and iteration are stable
    ordered = {r.record_id: assignment[r.record_id] for r in corpus.records}
    return SplitPlan(fractions=tuple(fractions), seed=seed, assignment=ordered)


def subset_training(
    corpus: Corpus, plan: SplitPlan, fraction: float, seed: int = 0
) -> set[str]:
    """Stratified subsample of the train split with exactly
    round(fraction * |train|) records; validation and test are untouched."""
    if not (0.0 < fraction <= 1.0):
        raise SplitterError(f"fraction must be in (0, 1], got {fraction!r}")
    train_items = [
        (r.record_id, r.codes)
        for r in corpus.records
        if plan.assignment.get(r.record_id) == "train"
    ]
    if fraction == 1.0:
        return {rid for rid, _ in train_items}
    n_selected = round(fraction * len(train_items))
    names = ("selected", "rest")
    capacities = {"selected": n_selected, "rest": len(train_items) - n_selected}
    assignment = _stratify(
        train_items, names, (fraction, 1.0 - fraction), SeededLcg(seed), capacities
    )
    return {rid for rid, split in assignment.items() if split == "selected"}


def split_records(corpus: Corpus, plan: SplitPlan) -> dict[str, list[ClinicalRecord]]:
    """Apply a plan to a corpus; every record must be assigned exactly once
    and the plan must not reference ids outside the corpus."""
    known = {r.record_id for r in corpus.records}
    extra = set(plan.assignment) - known
    if extra:
        raise SplitterError(f"plan references unknown record ids: {sorted(extra)[:5]}")
    out: dict[str, list[ClinicalRecord]] = {s: [] for s in SPLIT_NAMES}
    for record in corpus.records:
        split = plan.assignment.get(record.record_id)
        if split is None:
            raise SplitterError(f"record {record.record_id!r} missing from plan")
        out[split].append(record)
    return out


def save_plan(plan: SplitPlan, path: str | Path) -> None:
    lines = [
        json.dumps({"record_id": rid, "split": split}, sort_keys=True)
        for rid, split in sorted(plan.assignment.items())
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_plan(
    path: str | Path,
    fractions: tuple[float, float, float] | None = None,
    seed: int = 0,
) -> SplitPlan:
    """Read a persisted plan. The assignment in the file is authoritative;
    when fractions are not supplied they are recovered from the observed
    split proportions."""
    assignment: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise SplitterError(f"{path}: line {lineno}: {err}") from None
            if set(obj) != {"record_id", "split"}:
                raise SplitterError(f"{path}: line {lineno}: expected record_id and split")
            rid = obj["record_id"]
            if rid in assignment:
                raise SplitterError(f"{path}: line {lineno}: duplicate record {rid!r}")
            assignment[rid] = obj["split"]
    if not assignment:
        raise SplitterError(f"{path}: empty split plan")
    if fractions is None:
        n = len(assignment)
        counts = Counter(assignment.values())
        fractions = tuple(counts.get(s, 0) / n for s in SPLIT_NAMES)
    return SplitPlan(fractions=tuple(fractions), seed=seed, assignment=assignment)

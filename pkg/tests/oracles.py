"""Independent reference implementations used to cross-check the package.

Everything here is written the dumb, obvious way on purpose: breadth-first
search on reversed edges, brute-force set folds, O(n^2) closures. Tests
compare the real implementations against these.
"""

from __future__ import annotations

import math
from collections import deque
from typing import Iterable, Mapping, Sequence


def bfs_depths(parents: Mapping[str, set[str]], nodes: Iterable[str], root: str) -> dict:
    """Distance from root to each node along reversed (parent -> child) edges."""
    children: dict[str, list[str]] = {n: [] for n in nodes}
    for child, ps in parents.items():
        for parent in ps:
            children[parent].append(child)
    dist: dict[str, int | None] = {n: None for n in children}
    dist[root] = 0
    queue = deque([root])
    while queue:
        cur = queue.popleft()
        for child in children[cur]:
            if dist[child] is None:
                dist[child] = dist[cur] + 1
                queue.append(child)
    return dist


def random_dag(rng, max_nodes: int):
    """Random rooted DAG as (codes, parents, root).

    Node i may only point at nodes < i, so the edge set is acyclic by
    construction. Some nodes get no parents and stay unreachable.
    """
    n = int(rng.integers(1, max_nodes + 1))
    codes = [f"c{i}" for i in range(n)]
    parents: dict[str, set[str]] = {}
    for i in range(1, n):
        if rng.random() < 0.15:
            continue  # orphan: unreachable from the root
        k = int(rng.integers(1, 4))
        choices = rng.choice(i, size=min(k, i), replace=False)
        parents[codes[i]] = {codes[int(j)] for j in choices}
    return codes, parents, codes[0]


def transitive_ancestors(parents: Mapping[str, set[str]], code: str) -> set[str]:
    """Brute-force ancestor closure by repeated expansion until stable."""
    closure: set[str] = set(parents.get(code, set()))
    while True:
        extra = set()
        for c in closure:
            extra |= parents.get(c, set())
        if extra <= closure:
            return closure
        closure |= extra


def fold_events(events: Sequence[dict]) -> dict[str, dict]:
    """Replay decision events into final per-record code sets.

    Events are folded in ascending event-id order per record. accept and
    augment include the code, reject excludes it, finalize closes the record.
    """
    by_record: dict[str, list[dict]] = {}
    for ev in events:
        by_record.setdefault(ev["record_id"], []).append(ev)
    out: dict[str, dict] = {}
    for record_id, evs in by_record.items():
        evs = sorted(evs, key=lambda e: e["event_id"])
        codes: set[str] = set()
        finalized = False
        for ev in evs:
            action = ev["action"]
            if action in ("accept", "augment"):
                codes.add(ev["code"])
            elif action == "reject":
                codes.discard(ev["code"])
            elif action == "finalize":
                finalized = True
        out[record_id] = {"codes": codes, "finalized": finalized}
    return out


def confusion_by_class(targets: Sequence[set], predictions: Sequence[set], classes: Sequence[str]):
    """Per-class tp/fp/fn counted record by record."""
    counts = {c: {"tp": 0, "fp": 0, "fn": 0} for c in classes}
    for truth, pred in zip(targets, predictions):
        for c in classes:
            t, p = c in truth, c in pred
            if t and p:
                counts[c]["tp"] += 1
            elif p:
                counts[c]["fp"] += 1
            elif t:
                counts[c]["fn"] += 1
    return counts


def weighted_prf(targets: Sequence[set], predictions: Sequence[set], classes: Sequence[str]):
    """Support-weighted macro precision/recall/F1 plus exact match, from scratch."""
    counts = confusion_by_class(targets, predictions, classes)
    weights = {c: counts[c]["tp"] + counts[c]["fn"] for c in classes}
    total = sum(weights.values())
    precision = recall = f1 = 0.0
    for c in classes:
        tp, fp, fn = counts[c]["tp"], counts[c]["fp"], counts[c]["fn"]
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        if total:
            precision += weights[c] * p / total
            recall += weights[c] * r / total
            f1 += weights[c] * f / total
    exact = sum(1 for t, p in zip(targets, predictions) if t == p)
    em = exact / len(targets) if targets else 0.0
    return precision, recall, f1, em


def t_quantile_df2(confidence: float) -> float:
    """Two-sided Student-t quantile for 2 degrees of freedom, closed form.

    For df=2 the CDF inverts algebraically: t = sqrt(2 u^2 / (1 - u^2))
    with u = confidence level of the one-sided tail.
    """
    u = (1 + confidence) / 2
    x = 2 * u - 1
    return math.sqrt(2 * x * x / (1 - x * x))

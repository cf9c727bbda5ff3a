"""SNOMED-CT style concept graph: hierarchy depth, ancestor closure,
inactive-to-active code migration, disease-category assignment, and term
search.

The is-a relation is a DAG of child -> parent edges rooted at a single
top-level concept (depth 0). Codes with no path to the root (typically
inactive codes absent from the current hierarchy) have no depth.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping


class TerminologyError(ValueError):
    """Bad graph data or a reference to an unknown concept."""


# Disease categories in fixed priority order; the final entry is the
# fallback for codes with no mapped ancestor.
CATEGORY_PRIORITY = (
    "Neoplasm and/or hamartoma",
    "Inflammatory disorder",
    "Traumatic or non-traumatic injury",
    "Degenerative disorder",
    "Disorder of cardiovascular system",
    "Metabolic disease",
    "Congenital disease",
    "Poisoning",
    "Nutritional disorder",
    "Other",
)

_CATEGORY_RANK = {name: i for i, name in enumerate(CATEGORY_PRIORITY)}


@dataclass
class ConceptGraph:
    """Immutable concept graph; build once, query from any thread."""

    concepts: dict[str, tuple[str, bool]]  # code -> (preferred term, active)
    parents: dict[str, set[str]]  # is_a: child -> parents
    root: str
    inactive_map: dict[str, str] = field(default_factory=dict)
    category_map: dict[str, str] = field(default_factory=dict)
    _depth_cache: dict[str, int | None] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.root not in self.concepts:
            raise TerminologyError(f"root {self.root!r} is not a known concept")
        if self.parents.get(self.root):
            raise TerminologyError("root concept must have no parents")
        for child, parents in self.parents.items():
            for code in (child, *parents):
                if code not in self.concepts:
                    raise TerminologyError(f"edge endpoint {code!r} is not a known concept")
        self._check_acyclic()
        # keys must be inactive when the concept is known; values may chain
        # through further mappings, so their activity is not constrained here
        for old in self.inactive_map:
            if old in self.concepts and self.concepts[old][1]:
                raise TerminologyError(f"inactive_map key {old!r} is an active concept")
        for code, category in self.category_map.items():
            if category not in _CATEGORY_RANK:
                raise TerminologyError(f"unknown disease category {category!r} for {code!r}")

    def _check_acyclic(self) -> None:
        indegree = {code: 0 for code in self.concepts}
        children: dict[str, list[str]] = {code: [] for code in self.concepts}
        for child, parents in self.parents.items():
            for parent in parents:
                indegree[child] += 1
                children[parent].append(child)
        queue = deque(code for code, deg in indegree.items() if deg == 0)
        seen = 0
        while queue:
            code = queue.popleft()
            seen += 1
            for child in children[code]:
                indegree[child] -= 1
                if indegree[child] == 0:
                    queue.append(child)
        if seen != len(self.concepts):
            raise TerminologyError("is_a relation contains a cycle")

    def _require(self, code: str) -> None:
        if code not in self.concepts:
            raise TerminologyError(f"unknown code {code!r}")

    def term(self, code: str) -> str:
        self._require(code)
        return self.concepts[code][0]


def depth(graph: ConceptGraph, code: str) -> int | None:
    """Length of the shortest upward is-a path from `code` to the root.

    The root itself is at depth 0. Returns None when no path to the root
    exists. Memoized on the graph; iterative so kilonode chains are safe.
    """
    graph._require(code)
    memo = graph._depth_cache
    stack = [code]
    while stack:
        cur = stack[-1]
        if cur in memo:
            stack.pop()
            continue
        if cur == graph.root:
            memo[cur] = 0
            stack.pop()
            continue
        parents = graph.parents.get(cur, set())
        pending = [p for p in parents if p not in memo]
        if pending:
            stack.extend(pending)
            continue
        reachable = [memo[p] for p in parents if memo[p] is not None]
        memo[cur] = min(reachable) + 1 if reachable else None
        stack.pop()
    return memo[code]


def ancestors(graph: ConceptGraph, code: str) -> set[str]:
    """Transitive is-a closure above `code`, excluding the code itself."""
    graph._require(code)
    seen: set[str] = set()
    frontier = list(graph.parents.get(code, set()))
    while frontier:
        cur = frontier.pop()
        if cur in seen:
            continue
        seen.add(cur)
        frontier.extend(graph.parents.get(cur, set()))
    return seen


def migrate(graph: ConceptGraph, codes: Iterable[str]) -> set[str]:
    """Replace inactive codes by their active targets, chasing mapping
    chains to a fixed point. A mapping cycle is an error."""
    result: set[str] = set()
    for code in codes:
        seen: list[str] = []
        cur = code
        while cur in graph.inactive_map:
            if cur in seen:
                cycle = seen[seen.index(cur):] + [cur]
                raise TerminologyError(
                    "inactive_map cycle: " + " -> ".join(cycle)
                )
            seen.append(cur)
            cur = graph.inactive_map[cur]
        result.add(cur)
    return result


def categorize(graph: ConceptGraph, code: str) -> str:
    """Disease category of the code: the highest-priority category mapped to
    the code itself or any ancestor; the fallback category otherwise."""
    graph._require(code)
    candidates = [
        graph.category_map[c]
        for c in (code, *ancestors(graph, code))
        if c in graph.category_map
    ]
    if not candidates:
        return CATEGORY_PRIORITY[-1]
    return min(candidates, key=_CATEGORY_RANK.__getitem__)


def search(graph: ConceptGraph, query: str, limit: int) -> list[tuple[str, str]]:
    """Case-insensitive substring search over preferred terms.

    Ranked by (match position, term length, code); at most `limit` results.
    """
    if limit < 1:
        raise TerminologyError("limit must be positive")
    if not query:
        return []
    needle = query.lower()
    hits: list[tuple[int, int, str, str]] = []
    for code, (term, _active) in graph.concepts.items():
        pos = term.lower().find(needle)
        if pos >= 0:
            hits.append((pos, len(term), code, term))
    hits.sort()
    return [(code, term) for _pos, _len, code, term in hits[:limit]]


# --- tab-separated ingestion ------------------------------------------------
#
# Four UTF-8 TSV files, each with a single header line (skipped):
#   concepts:      code <TAB> preferred term <TAB> active (1/0/true/false)
#   relationships: child code <TAB> parent code
#   mapping:       inactive code <TAB> active replacement code   (optional)
#   categories:    code <TAB> disease category name              (optional)


def _read_tsv(path: str | Path, n_cols: int) -> list[list[str]]:
    rows: list[list[str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise TerminologyError(f"{path}: missing header line")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != n_cols:
            raise TerminologyError(
                f"{path}: line {lineno}: expected {n_cols} columns, got {len(cols)}"
            )
        rows.append([c.strip() for c in cols])
    return rows


def _parse_active(value: str, where: str) -> bool:
    low = value.lower()
    if low in ("1", "true"):
        return True
    if low in ("0", "false"):
        return False
    raise TerminologyError(f"{where}: bad active flag {value!r}")


def load_concept_graph(
    concepts_path: str | Path,
    relationships_path: str | Path,
    root: str,
    mapping_path: str | Path | None = None,
    categories_path: str | Path | None = None,
) -> ConceptGraph:
    concepts: dict[str, tuple[str, bool]] = {}
    for i, (code, term, active) in enumerate(_read_tsv(concepts_path, 3), start=2):
        if code in concepts:
            raise TerminologyError(f"{concepts_path}: duplicate concept {code!r}")
        concepts[code] = (term, _parse_active(active, f"{concepts_path}: line {i}"))

    parents: dict[str, set[str]] = {}
    for child, parent in _read_tsv(relationships_path, 2):
        parents.setdefault(child, set()).add(parent)

    inactive_map: dict[str, str] = {}
    if mapping_path is not None:
        for old, new in _read_tsv(mapping_path, 2):
            inactive_map[old] = new

    category_map: dict[str, str] = {}
    if categories_path is not None:
        for code, category in _read_tsv(categories_path, 2):
            category_map[code] = category

    return ConceptGraph(
        concepts=concepts,
        parents=parents,
        root=root,
        inactive_map=inactive_map,
        category_map=category_map,
    )

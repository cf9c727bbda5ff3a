"""Visit-record data model, text cleaning, input assembly, JSONL I/O, and a
synthetic corpus generator.

A corpus is an ordered list of clinical visit records, each carrying free-text
sections and a set of assigned diagnosis codes, plus a deterministic code
inventory (all codes seen anywhere, sorted lexicographically, densely indexed).
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

SECTION_NAMES = (
    "diagnosis",
    "assessment",
    "presenting_complaint",
    "history",
    "physical_exam",
    "procedures_treatments",
)

SPLIT_NAMES = ("train", "validation", "test")


class CorpusError(ValueError):
    """Malformed record, file, or generator configuration."""


_CODE_RE = re.compile(r"^[0-9]+$")

# The five XML-predefined entities plus numeric (decimal / hex) escapes.
# Anything else passes through untouched.
_ENTITY_RE = re.compile(r"&(amp|lt|gt|quot|apos|#[0-9]+|#[xX][0-9a-fA-F]+);", re.IGNORECASE)
_NAMED_ENTITIES = {"amp": "&", "lt": "<", "gt": ">", "quot": '"', "apos": "'"}

_WS_RE = re.compile(r"\s+")


def _entity_char(body: str) -> str | None:
    low = body.lower()
    if low in _NAMED_ENTITIES:
        return _NAMED_ENTITIES[low]
    try:
        cp = int(body[2:], 16) if low.startswith("#x") else int(body[1:])
    except ValueError:
        return None
    # reject out-of-range and surrogate code points rather than emit
    # unencodable text
    if cp > 0x10FFFF or 0xD800 <= cp <= 0xDFFF:
        return None
    return chr(cp)


def clean_text(raw: str) -> str:
    """Minimal cleaning: unescape character entities, lowercase, collapse
    whitespace.

    Entity replacement is iterated to a fixed point so that double-escaped
    sources ("&amp;amp;") collapse fully and the whole function is idempotent.
    Each replacement strictly shortens the string, so the loop terminates.
    """

    def _sub(m: re.Match) -> str:
        ch = _entity_char(m.group(1))
        return m.group(0) if ch is None else ch

    text = raw
    while True:
        replaced = _ENTITY_RE.sub(_sub, text)
        if replaced == text:
            break
        text = replaced
    text = text.lower()
    return _WS_RE.sub(" ", text).strip()


@dataclass(frozen=True)
class ClinicalRecord:
    """One patient visit: sectioned free text plus its assigned code set.

    Empty section texts are dropped at construction so that "absent" and
    "empty" are the same state (the JSONL schema treats them as equal).
    """

    record_id: str
    sections: Mapping[str, str]
    codes: frozenset[str]
    split_tag: str | None = None

    def __post_init__(self) -> None:
        if not self.record_id:
            raise CorpusError("record_id must be nonempty")
        for name in self.sections:
            if name not in SECTION_NAMES:
                raise CorpusError(f"unknown section {name!r} in record {self.record_id!r}")
        object.__setattr__(
            self, "sections", {k: v for k, v in self.sections.items() if v != ""}
        )
        for code in self.codes:
            if not _CODE_RE.match(code):
                raise CorpusError(
                    f"code {code!r} in record {self.record_id!r} is not a digit string"
                )
        object.__setattr__(self, "codes", frozenset(self.codes))
        if self.split_tag is not None and self.split_tag not in SPLIT_NAMES:
            raise CorpusError(f"unknown split tag {self.split_tag!r}")

    def section(self, name: str) -> str:
        if name not in SECTION_NAMES:
            raise CorpusError(f"unknown section {name!r}")
        return self.sections.get(name, "")


def build_input(record: ClinicalRecord, fields: Sequence[str]) -> str:
    """Cleaned concatenation of the named sections, in the given order.

    Missing or empty sections contribute nothing.
    """
    if not fields:
        raise CorpusError("fields must be nonempty")
    for name in fields:
        if name not in SECTION_NAMES:
            raise CorpusError(f"unknown input field {name!r}")
    return clean_text(" ".join(record.sections.get(name, "") for name in fields))


@dataclass
class Corpus:
    """Ordered records plus the lexicographically sorted code inventory."""

    records: list[ClinicalRecord]
    inventory: list[str]
    code_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.code_index = {code: i for i, code in enumerate(self.inventory)}
        if len(self.code_index) != len(self.inventory):
            raise CorpusError("inventory contains duplicate codes")
        if self.inventory != sorted(self.inventory):
            raise CorpusError("inventory must be sorted lexicographically")
        for rec in self.records:
            missing = rec.codes - self.code_index.keys()
            if missing:
                raise CorpusError(
                    f"record {rec.record_id!r} uses codes missing from inventory: "
                    f"{sorted(missing)}"
                )

    @classmethod
    def from_records(cls, records: Iterable[ClinicalRecord]) -> "Corpus":
        records = list(records)
        seen: set[str] = set()
        for rec in records:
            if rec.record_id in seen:
                raise CorpusError(f"duplicate record_id {rec.record_id!r}")
            seen.add(rec.record_id)
        inventory = sorted({code for rec in records for code in rec.codes})
        return cls(records=records, inventory=inventory)

    @property
    def n_codes(self) -> int:
        return len(self.inventory)

    def __len__(self) -> int:
        return len(self.records)

    def target_indices(self, record: ClinicalRecord) -> list[int]:
        return sorted(self.code_index[c] for c in record.codes)


def _record_to_obj(rec: ClinicalRecord) -> dict:
    obj: dict = {
        "record_id": rec.record_id,
        "sections": {k: rec.sections[k] for k in SECTION_NAMES if k in rec.sections},
        "codes": sorted(rec.codes),
    }
    if rec.split_tag is not None:
        obj["split"] = rec.split_tag
    return obj


def _record_from_obj(obj: dict, where: str) -> ClinicalRecord:
    if not isinstance(obj, dict):
        raise CorpusError(f"{where}: record must be a JSON object")
    extra = set(obj) - {"record_id", "sections", "codes", "split"}
    if extra:
        raise CorpusError(f"{where}: unknown keys {sorted(extra)}")
    try:
        return ClinicalRecord(
            record_id=obj.get("record_id", ""),
            sections=obj.get("sections", {}) or {},
            codes=frozenset(obj.get("codes", [])),
            split_tag=obj.get("split"),
        )
    except CorpusError as exc:
        raise CorpusError(f"{where}: {exc}") from exc


def load_corpus(path: str | Path) -> Corpus:
    """Read a newline-delimited JSON corpus (one record per line, UTF-8)."""
    records: list[ClinicalRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            rec = _record_from_obj(obj, f"line {lineno}")
            if rec.record_id in seen:
                raise CorpusError(f"line {lineno}: duplicate record_id {rec.record_id!r}")
            seen.add(rec.record_id)
            records.append(rec)
    return Corpus.from_records(records)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write the corpus as JSONL (UTF-8, LF line endings)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in corpus.records:
            fh.write(json.dumps(_record_to_obj(rec), ensure_ascii=False) + "\n")


def corpus_digest(corpus: Corpus) -> str:
    """Stable content hash of the corpus, used as a provenance id."""
    h = hashlib.sha256()
    for rec in corpus.records:
        h.update(json.dumps(_record_to_obj(rec), sort_keys=True).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


# --- synthetic corpus generation -------------------------------------------
#
# Stands in for the proprietary hand-coded visit data. Each code gets a fixed
# small set of synonym surface forms built from anatomy/condition word pairs;
# the diagnosis section concatenates one surface form per assigned code plus
# distractor tokens, and the assessment section is longer narrative filler
# that mentions a random subset of the same codes' surface forms.

_ANATOMY = (
    "renal", "hepatic", "gastric", "otic", "dermal", "ocular", "cardiac",
    "femoral", "nasal", "oral", "pedal", "spinal", "aural", "tarsal",
    "carpal", "thoracic", "lumbar", "cranial", "caudal", "orbital",
    "pelvic", "humeral", "tibial", "splenic",
)

_CONDITION = (
    "stasis", "lesion", "fracture", "edema", "fibrosis", "stenosis",
    "prolapse", "abscess", "neoplasia", "dermatitis", "myopathy",
    "effusion", "dysplasia", "avulsion", "granuloma", "erosion",
    "atrophy", "spasm", "ulceration", "necrosis", "torsion",
    "hyperplasia", "rupture", "sclerosis",
)

_QUALIFIERS = ("chronic", "acute", "mild", "severe", "recurrent", "suspected")

_ROMAN = (
    "i", "ii", "iii", "iv", "v", "vi", "vii", "viii", "ix", "x",
    "xi", "xii", "xiii", "xiv", "xv", "xvi", "xvii", "xviii", "xix", "xx",
)

_FILLER = (
    "patient", "presented", "today", "with", "ongoing", "signs", "noted",
    "during", "examination", "stable", "condition", "owner", "reports",
    "gradual", "improvement", "appetite", "normal", "activity", "reduced",
    "monitoring", "recommended", "followup", "scheduled", "treatment",
    "initiated", "good", "response", "observed", "hydration", "adequate",
    "weight", "unchanged", "vitals", "within", "limits", "plan", "discussed",
)

_DISTRACTORS = _ANATOMY + _CONDITION + _QUALIFIERS


@dataclass(frozen=True)
class SyntheticConfig:
    """Generator settings for a synthetic visit corpus."""

    n_records: int
    n_codes: int
    zipf_exponent: float = 1.2
    mean_codes_per_visit: float = 2.0
    distractor_rate: float = 0.2

    def __post_init__(self) -> None:
        if self.n_codes < 1:
            raise CorpusError("n_codes must be >= 1")
        if self.n_records < 0:
            raise CorpusError("n_records must be >= 0")
        if self.zipf_exponent < 0:
            raise CorpusError("zipf_exponent must be >= 0")
        if self.mean_codes_per_visit < 1:
            raise CorpusError("mean_codes_per_visit must be >= 1")
        if not 0 <= self.distractor_rate <= 1:
            raise CorpusError("distractor_rate must be in [0, 1]")


def zipf_pmf(n: int, exponent: float) -> np.ndarray:
    """Zipf probabilities over ranks 1..n, brute-force normalized."""
    weights = np.arange(1, n + 1, dtype=np.float64) ** -float(exponent)
    return weights / weights.sum()


def _code_templates(
    codes: Sequence[str], rng: np.random.Generator
) -> dict[str, list[str]]:
    """Fixed 2-4 synonym surface forms per code, unique word pair per code."""
    n_pairs = len(_ANATOMY) * len(_CONDITION)
    if len(codes) > n_pairs * len(_ROMAN):
        raise CorpusError(f"generator supports at most {n_pairs * len(_ROMAN)} codes")
    order = rng.permutation(n_pairs)
    templates: dict[str, list[str]] = {}
    for i, code in enumerate(codes):
        pair = int(order[i % n_pairs])
        a = _ANATOMY[pair // len(_CONDITION)]
        b = _CONDITION[pair % len(_CONDITION)]
        suffix = "" if i < n_pairs else f" type {_ROMAN[i // n_pairs]}"
        stem = f"{a} {b}{suffix}"
        variants = [
            stem,
            f"chronic {stem}",
            f"acute {stem}",
            f"{stem} syndrome",
            f"suspected {stem}",
        ]
        k = int(rng.integers(2, 5))
        picked = rng.choice(len(variants), size=k, replace=False)
        templates[code] = [variants[j] for j in sorted(int(p) for p in picked)]
    return templates


def _sample_codes(
    pmf: np.ndarray, count: int, codes: Sequence[str], rng: np.random.Generator
) -> list[str]:
    """Draw `count` distinct codes, sequentially renormalizing the Zipf pmf."""
    remaining = pmf.copy()
    chosen: list[str] = []
    for _ in range(count):
        probs = remaining / remaining.sum()
        idx = int(rng.choice(len(codes), p=probs))
        chosen.append(codes[idx])
        remaining[idx] = 0.0
    return chosen


def generate_synthetic(config: SyntheticConfig, seed: int) -> Corpus:
    """Deterministic synthetic corpus: code sets follow a Zipf law, section
    texts carry templated surface forms for the assigned codes."""
    rng = np.random.default_rng(seed)
    codes = [str(100001 + 2 * i) for i in range(config.n_codes)]
    pmf = zipf_pmf(config.n_codes, config.zipf_exponent)
    templates = _code_templates(codes, rng)

    records: list[ClinicalRecord] = []
    for j in range(config.n_records):
        count = min(int(rng.geometric(1.0 / config.mean_codes_per_visit)), config.n_codes)
        visit_codes = _sample_codes(pmf, count, codes, rng)

        diag_tokens: list[str] = []
        for code in visit_codes:
            forms = templates[code]
            diag_tokens.extend(forms[int(rng.integers(len(forms)))].split())
        n_noise = int(rng.binomial(len(diag_tokens), config.distractor_rate))
        for _ in range(n_noise):
            pos = int(rng.integers(0, len(diag_tokens) + 1))
            diag_tokens.insert(pos, _DISTRACTORS[int(rng.integers(len(_DISTRACTORS)))])

        n_filler = int(rng.integers(25, 46))
        assess_tokens = [
            _FILLER[int(rng.integers(len(_FILLER)))] for _ in range(n_filler)
        ]
        for code in visit_codes:
            if rng.random() < 0.5:
                forms = templates[code]
                phrase = forms[int(rng.integers(len(forms)))].split()
                pos = int(rng.integers(0, len(assess_tokens) + 1))
                assess_tokens[pos:pos] = phrase

        records.append(
            ClinicalRecord(
                record_id=f"v{j:06d}",
                sections={
                    "diagnosis": " ".join(diag_tokens),
                    "assessment": " ".join(assess_tokens),
                },
                codes=frozenset(visit_codes),
            )
        )

    # inventory is the union of sampled codes, so JSONL round trips are exact
    return Corpus.from_records(records)

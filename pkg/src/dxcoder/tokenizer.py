"""Word-level vocabulary and fixed-maximum-length integer encoding.

Input text is expected to be cleaned already (lowercase, collapsed
whitespace); tokens are maximal runs of [a-z0-9]. Three ids are reserved:
0 padding, 1 unknown, 2 sequence-start. Padding happens at batch assembly,
not here.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD_ID = 0
UNK_ID = 1
START_ID = 2
_N_RESERVED = 3

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class TokenizerError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


@dataclass(frozen=True)
class Vocabulary:
    """Immutable token table; encode is pure, share freely across threads."""

    token_to_id: dict[str, int]
    max_len: int = 256
    lowercase: bool = True

    def __post_init__(self) -> None:
        if self.max_len < 1:
            raise TokenizerError("max_len must be positive")
        if not self.lowercase:
            raise TokenizerError("vocabulary is always lowercase")
        ids = sorted(self.token_to_id.values())
        if ids != list(range(_N_RESERVED, _N_RESERVED + len(ids))):
            raise TokenizerError(
                f"surface token ids must be dense {_N_RESERVED}..V-1, got {ids[:8]}..."
            )

    @property
    def size(self) -> int:
        return _N_RESERVED + len(self.token_to_id)


@dataclass(frozen=True)
class TokenizedExample:
    """One encoded record: id sequence plus a one-hot target over the
    code inventory."""

    ids: tuple[int, ...]
    truncated: bool
    target: np.ndarray

    def __post_init__(self) -> None:
        if not self.ids or self.ids[0] != START_ID:
            raise TokenizerError("id sequence must begin with the start id")
        bad = set(np.unique(self.target)) - {0, 1}
        if bad:
            raise TokenizerError(f"target vector must be binary, found {sorted(bad)}")


def build_vocab(
    texts: Iterable[str], min_count: int = 1, max_size: int = 50000, max_len: int = 256
) -> Vocabulary:
    """Most frequent tokens first, ties broken lexicographically, capped at
    max_size - 3 surface tokens (reserved ids take the first three slots)."""
    if min_count < 1:
        raise TokenizerError("min_count must be positive")
    if max_size < _N_RESERVED:
        raise TokenizerError(f"max_size must be at least {_N_RESERVED}")
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(tokenize(text))
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count),
        key=lambda t: (-counts[t], t),
    )[: max_size - _N_RESERVED]
    return Vocabulary(
        token_to_id={t: _N_RESERVED + i for i, t in enumerate(kept)},
        max_len=max_len,
    )


def encode(vocab: Vocabulary, text: str) -> tuple[list[int], bool]:
    """[start] + token ids, hard-truncated to max_len; flag reports whether
    anything was cut."""
    ids = [START_ID]
    ids.extend(vocab.token_to_id.get(t, UNK_ID) for t in tokenize(text))
    truncated = len(ids) > vocab.max_len
    return ids[: vocab.max_len], truncated


def corpus_stats(vocab: Vocabulary, texts: Sequence[str]) -> tuple[float, float, float]:
    """(mean pre-truncation token count, truncation rate, unknown rate).

    Token counts exclude the start id; the unknown rate is over all surface
    tokens before truncation. Empty input gives all zeros.
    """
    if not texts:
        return (0.0, 0.0, 0.0)
    total_tokens = 0
    truncated = 0
    unknown = 0
    for text in texts:
        tokens = tokenize(text)
        total_tokens += len(tokens)
        if 1 + len(tokens) > vocab.max_len:
            truncated += 1
        unknown += sum(1 for t in tokens if t not in vocab.token_to_id)
    mean = total_tokens / len(texts)
    trunc_rate = truncated / len(texts)
    unk_rate = unknown / total_tokens if total_tokens else 0.0
    return (mean, trunc_rate, unk_rate)


# --- persistence -------------------------------------------------------------
#
# One header line recording max_len and the reserved ids, then one
# token <TAB> id line per surface token in id order.

_HEADER_RE = re.compile(r"^#max_len=(\d+)\tpad=(\d+)\tunk=(\d+)\tstart=(\d+)$")


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    lines = [f"#max_len={vocab.max_len}\tpad={PAD_ID}\tunk={UNK_ID}\tstart={START_ID}"]
    for token, idx in sorted(vocab.token_to_id.items(), key=lambda kv: kv[1]):
        lines.append(f"{token}\t{idx}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_vocab(path: str | Path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise TokenizerError(f"{path}: empty vocabulary file")
    m = _HEADER_RE.match(lines[0])
    if not m:
        raise TokenizerError(f"{path}: bad header line {lines[0]!r}")
    max_len = int(m.group(1))
    if (int(m.group(2)), int(m.group(3)), int(m.group(4))) != (PAD_ID, UNK_ID, START_ID):
        raise TokenizerError(f"{path}: unexpected reserved id layout")
    token_to_id: dict[str, int] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 2:
            raise TokenizerError(f"{path}: line {lineno}: expected token<TAB>id")
        token, raw_id = parts
        if token in token_to_id:
            raise TokenizerError(f"{path}: line {lineno}: duplicate token {token!r}")
        token_to_id[token] = int(raw_id)
    return Vocabulary(token_to_id=token_to_id, max_len=max_len)

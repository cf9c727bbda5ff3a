"""Dataset assembly: corpus records to token sequences and one-hot target
matrices grouped by split, plus batched model evaluation against the
weighted-metric report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, build_input
from .evaluation import EvalReport, evaluate
from .model import ModelState, assemble_batch, forward, predict_batch
from .splitter import SplitPlan, split_records
from .tokenizer import Vocabulary, encode


class PipelineError(ValueError):
    pass


@dataclass
class EncodedSplit:
    """One split's model-ready view: parallel lists of record ids and token
    sequences, a float64 one-hot target matrix, and the code inventory that
    defines the target columns."""

    name: str
    record_ids: list[str]
    sequences: list[list[int]]
    targets: np.ndarray
    codes: tuple[str, ...]
    n_truncated: int

    def __len__(self) -> int:
        return len(self.sequences)

    def target_sets(self) -> list[set[str]]:
        return [
            {self.codes[i] for i in np.nonzero(row)[0]}
            for row in self.targets
        ]


def build_dataset(
    corpus: Corpus,
    plan: SplitPlan,
    vocab: Vocabulary,
    fields: tuple[str, ...] = ("diagnosis", "assessment"),
) -> dict[str, EncodedSplit]:
    """Encode every record once and group by the plan's split assignment."""
    groups = split_records(corpus, plan)
    codes = tuple(corpus.inventory)
    out: dict[str, EncodedSplit] = {}
    for split, records in groups.items():
        record_ids, sequences = [], []
        n_truncated = 0
        targets = np.zeros((len(records), len(codes)))
        for row, record in enumerate(records):
            ids, truncated = encode(vocab, build_input(record, fields))
            record_ids.append(record.record_id)
            sequences.append(ids)
            n_truncated += int(truncated)
            targets[row, corpus.target_indices(record)] = 1.0
        out[split] = EncodedSplit(
            name=split,
            record_ids=record_ids,
            sequences=sequences,
            targets=targets,
            codes=codes,
            n_truncated=n_truncated,
        )
    return out


def predict_codes(
    state: ModelState,
    split: EncodedSplit,
    threshold: float = 0.5,
    batch_size: int = 64,
) -> tuple[np.ndarray, list[set[str]]]:
    """Inference over a split in fixed-size batches; returns the probability
    matrix and per-record predicted code sets. Results are independent of
    batch_size (each row's logits depend only on that row)."""
    if batch_size < 1:
        raise PipelineError("batch_size must be positive")
    all_probs = []
    predicted: list[set[str]] = []
    for start in range(0, len(split.sequences), batch_size):
        chunk = split.sequences[start : start + batch_size]
        ids, mask = assemble_batch(chunk)
        logits = forward(state, ids, mask, train_mode=False)
        probs, index_sets = predict_batch(logits, threshold=threshold)
        all_probs.append(probs)
        predicted.extend({split.codes[i] for i in s} for s in index_sets)
    probs = np.vstack(all_probs) if all_probs else np.zeros((0, len(split.codes)))
    return probs, predicted


def evaluate_model(
    state: ModelState,
    split: EncodedSplit,
    threshold: float = 0.5,
    batch_size: int = 64,
) -> EvalReport:
    _, predicted = predict_codes(state, split, threshold, batch_size)
    return evaluate(split.target_sets(), predicted, split.codes)

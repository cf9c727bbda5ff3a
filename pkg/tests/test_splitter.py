from collections import Counter

import numpy as np
import pytest

from dxcoder.corpus import ClinicalRecord, Corpus
from dxcoder.splitter import (
    SeededLcg,
    SplitPlan,
    SplitterError,
    load_plan,
    save_plan,
    split_records,
    stratified_split,
    subset_training,
)


def rec(rid, codes):
    return ClinicalRecord(record_id=rid, sections={"diagnosis": "x"},
                          codes=frozenset(codes))


def corpus_of(code_sets):
    return Corpus.from_records(
        [rec(f"r{i:04d}", cs) for i, cs in enumerate(code_sets)]
    )


def random_corpus(rng, n_records, n_labels, empty_rate=0.05):
    codes = [str(100 + i) for i in range(n_labels)]
    sets = []
    for _ in range(n_records):
        if rng.random() < empty_rate:
            sets.append([])
            continue
        k = int(rng.integers(1, 4))
        sets.append([codes[int(j)] for j in rng.choice(n_labels, size=k, replace=False)])
    return corpus_of(sets)


def per_split_label_counts(corpus, plan):
    counts = {s: Counter() for s in ("train", "validation", "test")}
    for r in corpus.records:
        for code in r.codes:
            counts[plan.assignment[r.record_id]][code] += 1
    return counts


class TestLcg:
    def test_recurrence(self):
        lcg = SeededLcg(42)
        mask = (1 << 64) - 1
        expected = (6364136223846793005 * 42 + 1442695040888963407) & mask
        assert lcg.next() == expected
        expected2 = (6364136223846793005 * expected + 1442695040888963407) & mask
        assert lcg.next() == expected2

    def test_pick_is_modulo(self):
        a, b = SeededLcg(7), SeededLcg(7)
        assert a.pick(10) == b.next() % 10


class TestStratifiedSplit:
    def test_single_shared_label_divisible(self):
        corpus = corpus_of([["100"]] * 10)
        plan = stratified_split(corpus, (0.8, 0.1, 0.1), seed=1)
        sizes = Counter(plan.assignment.values())
        assert (sizes["train"], sizes["validation"], sizes["test"]) == (8, 1, 1)

    def test_partition_covers_corpus(self):
        rng = np.random.default_rng(3)
        corpus = random_corpus(rng, 97, 7)
        plan = stratified_split(corpus, seed=5)
        assert set(plan.assignment) == {r.record_id for r in corpus.records}

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(4)
        corpus = random_corpus(rng, 120, 9)
        a = stratified_split(corpus, seed=11)
        b = stratified_split(corpus, seed=11)
        assert a.assignment == b.assignment

    def test_label_counts_within_one_for_supported_labels(self):
        # the recount oracle: fraction * support vs observed, per split
        rng = np.random.default_rng(6)
        for trial in range(8):
            corpus = random_corpus(
                rng, int(rng.integers(60, 201)), int(rng.integers(3, 21))
            )
            plan = stratified_split(corpus, (0.8, 0.1, 0.1), seed=trial)
            support = Counter(c for r in corpus.records for c in r.codes)
            observed = per_split_label_counts(corpus, plan)
            for code, n in support.items():
                if n < 10:
                    continue
                for split, frac in zip(("train", "validation", "test"), (0.8, 0.1, 0.1)):
                    got = observed[split][code]
                    assert abs(got - frac * n) <= 1 + 1e-9, (
                        f"trial {trial} code {code} split {split}: "
                        f"{got} vs {frac * n:.2f}"
                    )

    def test_split_sizes_within_label_count_slack(self):
        rng = np.random.default_rng(7)
        corpus = random_corpus(rng, 150, 12, empty_rate=0.1)
        plan = stratified_split(corpus, (0.8, 0.1, 0.1), seed=2)
        sizes = Counter(plan.assignment.values())
        for split, frac in zip(("train", "validation", "test"), (0.8, 0.1, 0.1)):
            assert abs(sizes[split] - frac * 150) <= 12

    def test_empty_code_records_are_assigned(self):
        corpus = corpus_of([[] for _ in range(10)])
        plan = stratified_split(corpus, (0.8, 0.1, 0.1), seed=9)
        sizes = Counter(plan.assignment.values())
        assert sum(sizes.values()) == 10
        assert sizes["train"] == 8

    def test_invalid_fractions(self):
        corpus = corpus_of([["100"]])
        with pytest.raises(SplitterError, match="sum"):
            stratified_split(corpus, (0.8, 0.1, 0.2))
        with pytest.raises(SplitterError, match="nonneg"):
            stratified_split(corpus, (1.2, -0.1, -0.1))

    def test_empty_corpus_rejected(self):
        with pytest.raises(SplitterError, match="empty"):
            stratified_split(Corpus.from_records([]))


class TestSubsetTraining:
    def make(self, n=200, labels=10, seed=0):
        rng = np.random.default_rng(seed)
        corpus = random_corpus(rng, n, labels, empty_rate=0.0)
        plan = stratified_split(corpus, seed=seed)
        return corpus, plan

    def test_full_fraction_is_identity(self):
        corpus, plan = self.make()
        train_ids = {rid for rid, s in plan.assignment.items() if s == "train"}
        assert subset_training(corpus, plan, 1.0, seed=1) == train_ids

    def test_exact_size(self):
        corpus, plan = self.make(250, 12)
        n_train = sum(1 for s in plan.assignment.values() if s == "train")
        for fraction in (0.25, 0.5, 0.75):
            got = subset_training(corpus, plan, fraction, seed=3)
            assert len(got) == round(fraction * n_train)

    def test_subset_is_within_train(self):
        corpus, plan = self.make()
        got = subset_training(corpus, plan, 0.4, seed=2)
        train_ids = {rid for rid, s in plan.assignment.items() if s == "train"}
        assert got <= train_ids

    def test_per_label_proportions(self):
        # quarter of a 200-record train split keeps labels near 25%
        corpus, plan = self.make(250, 8, seed=5)
        train_ids = {rid for rid, s in plan.assignment.items() if s == "train"}
        got = subset_training(corpus, plan, 0.25, seed=7)
        by_id = {r.record_id: r for r in corpus.records}
        support = Counter(c for rid in train_ids for c in by_id[rid].codes)
        picked = Counter(c for rid in got for c in by_id[rid].codes)
        for code, n in support.items():
            if n >= 8:
                assert abs(picked[code] - 0.25 * n) <= 1 + 1e-9, code

    def test_deterministic(self):
        corpus, plan = self.make()
        assert subset_training(corpus, plan, 0.3, seed=4) == subset_training(
            corpus, plan, 0.3, seed=4
        )

    def test_fraction_bounds(self):
        corpus, plan = self.make(20, 3)
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(SplitterError, match="fraction"):
                subset_training(corpus, plan, bad)


class TestPlanModel:
    def test_unknown_split_rejected(self):
        with pytest.raises(SplitterError, match="unknown split"):
            SplitPlan(fractions=(0.8, 0.1, 0.1), seed=0, assignment={"r1": "dev"})

    def test_ids_filters_by_split(self):
        plan = SplitPlan(
            fractions=(0.8, 0.1, 0.1), seed=0,
            assignment={"a": "train", "b": "test", "c": "train"},
        )
        assert plan.ids("train") == ["a", "c"]
        with pytest.raises(SplitterError):
            plan.ids("holdout")

    def test_split_records_requires_full_cover(self):
        corpus = corpus_of([["100"], ["101"]])
        partial = SplitPlan(
            fractions=(0.8, 0.1, 0.1), seed=0, assignment={"r0000": "train"}
        )
        with pytest.raises(SplitterError, match="missing"):
            split_records(corpus, partial)

    def test_split_records_rejects_foreign_ids(self):
        corpus = corpus_of([["100"]])
        plan = SplitPlan(
            fractions=(0.8, 0.1, 0.1), seed=0,
            assignment={"r0000": "train", "ghost": "test"},
        )
        with pytest.raises(SplitterError, match="unknown record ids"):
            split_records(corpus, plan)

    def test_split_records_groups_in_corpus_order(self):
        corpus = corpus_of([["100"], ["101"], ["102"]])
        plan = SplitPlan(
            fractions=(0.8, 0.1, 0.1), seed=0,
            assignment={"r0000": "train", "r0001": "test", "r0002": "train"},
        )
        groups = split_records(corpus, plan)
        assert [r.record_id for r in groups["train"]] == ["r0000", "r0002"]
        assert groups["validation"] == []


class TestPlanPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        corpus = random_corpus(rng, 40, 5)
        plan = stratified_split(corpus, seed=13)
        p = tmp_path / "plan.jsonl"
        save_plan(plan, p)
        loaded = load_plan(p, fractions=plan.fractions, seed=plan.seed)
        assert loaded.assignment == plan.assignment

    def test_saved_bytes_deterministic(self, tmp_path):
        corpus = corpus_of([["100"], ["101"], []])
        plan = stratified_split(corpus, seed=1)
        a, b = tmp_path / "a", tmp_path / "b"
        save_plan(plan, a)
        save_plan(plan, b)
        assert a.read_bytes() == b.read_bytes()

    def test_loaded_fractions_recovered_from_counts(self, tmp_path):
        corpus = corpus_of([["100"]] * 10)
        plan = stratified_split(corpus, (0.8, 0.1, 0.1), seed=1)
        p = tmp_path / "plan.jsonl"
        save_plan(plan, p)
        loaded = load_plan(p)
        assert loaded.fractions == (0.8, 0.1, 0.1)

    def test_duplicate_record_rejected(self, tmp_path):
        p = tmp_path / "plan.jsonl"
        p.write_text(
            '{"record_id": "a", "split": "train"}\n'
            '{"record_id": "a", "split": "test"}\n',
            encoding="utf-8",
        )
        with pytest.raises(SplitterError, match="duplicate"):
            load_plan(p)

    def test_unexpected_keys_rejected(self, tmp_path):
        p = tmp_path / "plan.jsonl"
        p.write_text('{"record_id": "a", "split": "train", "x": 1}\n', encoding="utf-8")
        with pytest.raises(SplitterError, match="expected"):
            load_plan(p)

    def test_empty_plan_rejected(self, tmp_path):
        p = tmp_path / "plan.jsonl"
        p.write_text("", encoding="utf-8")
        with pytest.raises(SplitterError, match="empty"):
            load_plan(p)

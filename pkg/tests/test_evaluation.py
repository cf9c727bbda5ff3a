import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dxcoder.evaluation import (
    ConfidenceInterval,
    EvaluationError,
    confidence_interval,
    evaluate,
    exact_match,
    report_to_csv,
    report_to_json,
    save_report,
)

from oracles import t_quantile_df2, weighted_prf


class TestWorkedExample:
    def report(self):
        targets = [{"c1", "c2"}, {"c2"}]
        predictions = [{"c1"}, {"c2", "c3"}]
        return evaluate(targets, predictions, ["c1", "c2", "c3"])

    def test_weighted_metrics(self):
        r = self.report()
        assert round(r.weighted_precision, 2) == 100.00
        assert round(r.weighted_recall, 2) == 66.67
        assert round(r.weighted_f1, 2) == 77.78
        assert r.exact_match == 0.0

    def test_supports(self):
        r = self.report()
        by_code = {m.code: m for m in r.per_class}
        assert by_code["c1"].support == 1
        assert by_code["c2"].support == 2
        assert by_code["c3"].support == 0

    def test_zero_support_class_has_zero_weight(self):
        # c3 takes a false positive yet cannot drag the weighted metrics
        r = self.report()
        by_code = {m.code: m for m in r.per_class}
        assert by_code["c3"].fp == 1 and by_code["c3"].precision == 0.0
        assert r.weighted_precision == 100.0


class TestEvaluate:
    def test_identity_predictions(self):
        targets = [{"1", "2"}, {"3"}, set()]
        r = evaluate(targets, targets, ["1", "2", "3"])
        assert r.weighted_precision == 100.0
        assert r.weighted_recall == 100.0
        assert r.weighted_f1 == 100.0
        assert r.exact_match == 100.0

    def test_support_identity_per_class(self):
        targets = [{"1"}, {"1", "2"}, {"2"}]
        predictions = [{"2"}, {"1"}, set()]
        r = evaluate(targets, predictions, ["1", "2"])
        for m in r.per_class:
            assert m.tp + m.fn == m.support

    def test_length_mismatch(self):
        with pytest.raises(EvaluationError, match="target"):
            evaluate([{"1"}], [], ["1"])

    def test_codes_outside_inventory(self):
        with pytest.raises(EvaluationError, match="outside"):
            evaluate([{"9"}], [{"9"}], ["1"])

    def test_all_empty_targets(self):
        r = evaluate([set(), set()], [set(), {"1"}], ["1"])
        assert r.weighted_f1 == 0.0
        assert r.exact_match == 50.0

    def test_weighted_recall_is_micro_recall(self):
        rng = np.random.default_rng(5)
        inventory = [str(i) for i in range(6)]
        for _ in range(50):
            targets, predictions = [], []
            for _ in range(int(rng.integers(1, 9))):
                targets.append({c for c in inventory if rng.random() < 0.4})
                predictions.append({c for c in inventory if rng.random() < 0.4})
            r = evaluate(targets, predictions, inventory)
            total_tp = sum(m.tp for m in r.per_class)
            total_support = sum(m.support for m in r.per_class)
            if total_support:
                micro = 100.0 * total_tp / total_support
                assert math.isclose(r.weighted_recall, micro, abs_tol=1e-12)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(6)
        inventory = [str(i) for i in range(5)]
        for _ in range(200):
            n = int(rng.integers(1, 9))
            targets = [{c for c in inventory if rng.random() < 0.35} for _ in range(n)]
            predictions = [{c for c in inventory if rng.random() < 0.35} for _ in range(n)]
            r = evaluate(targets, predictions, inventory)
            p, rec, f1, em = weighted_prf(targets, predictions, inventory)
            assert math.isclose(r.weighted_precision, 100 * p, abs_tol=1e-12)
            assert math.isclose(r.weighted_recall, 100 * rec, abs_tol=1e-12)
            assert math.isclose(r.weighted_f1, 100 * f1, abs_tol=1e-12)
            assert math.isclose(r.exact_match, 100 * em, abs_tol=1e-12)


class TestExactMatch:
    def test_empty_equals_empty(self):
        assert exact_match([set()], [set()]) == 100.0

    def test_half(self):
        assert exact_match([{"1"}, {"2"}], [{"1"}, {"3"}]) == 50.0

    def test_no_records(self):
        assert exact_match([], []) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(EvaluationError):
            exact_match([{"1"}], [])

    @given(st.lists(st.frozensets(st.sampled_from(["a", "b", "c"])), min_size=1, max_size=10))
    def test_order_invariant(self, targets):
        rng = np.random.default_rng(0)
        predictions = [frozenset({"a"}) for _ in targets]
        base = exact_match(targets, predictions)
        perm = list(rng.permutation(len(targets)))
        assert exact_match([targets[i] for i in perm], [predictions[i] for i in perm]) == base


class TestConfidenceInterval:
    def test_three_run_example(self):
        ci = confidence_interval([70.0, 72.0, 74.0])
        assert ci.mean == 72.0
        assert abs(ci.half_width - 4.968) < 1e-3
        assert abs(ci.t_quantile - 4.302653) < 1e-5
        assert ci.n_runs == 3

    def test_zero_variance_is_exactly_zero(self):
        ci = confidence_interval([55.5, 55.5, 55.5])
        assert ci.mean == 55.5
        assert ci.half_width == 0.0

    def test_too_few_values(self):
        with pytest.raises(EvaluationError, match="at least 2"):
            confidence_interval([1.0])

    def test_bad_level(self):
        with pytest.raises(EvaluationError, match="level"):
            confidence_interval([1.0, 2.0], level=1.0)

    def test_df2_quantile_matches_closed_form(self):
        # independent route: algebraic inversion of the df=2 t distribution
        for level in (0.8, 0.9, 0.95, 0.99):
            ci = confidence_interval([1.0, 2.0, 3.0], level=level)
            assert math.isclose(ci.t_quantile, t_quantile_df2(level), rel_tol=1e-9)

    def test_two_values_use_df1(self):
        ci = confidence_interval([10.0, 20.0], level=0.95)
        assert abs(ci.t_quantile - 12.7062) < 1e-3

    def test_half_width_scales_with_sigma(self):
        narrow = confidence_interval([10.0, 11.0, 12.0])
        wide = confidence_interval([10.0, 12.0, 14.0])
        assert math.isclose(wide.half_width, 2 * narrow.half_width, rel_tol=1e-12)


class TestSerialization:
    def report(self):
        return evaluate([{"1", "2"}, {"2"}], [{"1"}, {"2", "3"}], ["1", "2", "3"])

    def test_json_rounds_to_two_decimals(self):
        import json
        obj = json.loads(report_to_json(self.report()))
        assert obj["weighted_recall"] == 66.67
        assert obj["weighted_f1"] == 77.78
        assert obj["n_records"] == 2 and obj["n_classes"] == 3

    def test_csv_shape(self):
        lines = report_to_csv(self.report()).splitlines()
        assert lines[0] == "code,support,tp,fp,fn,precision,recall,f1"
        assert len(lines) == 4
        assert lines[1].startswith("1,1,1,0,0,")

    def test_bytes_deterministic(self, tmp_path):
        a_json, a_csv = tmp_path / "a.json", tmp_path / "a.csv"
        b_json, b_csv = tmp_path / "b.json", tmp_path / "b.csv"
        save_report(self.report(), a_json, a_csv)
        save_report(self.report(), b_json, b_csv)
        assert a_json.read_bytes() == b_json.read_bytes()
        assert a_csv.read_bytes() == b_csv.read_bytes()

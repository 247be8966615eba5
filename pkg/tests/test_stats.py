import json
import math

import numpy as np
import pytest
from scipy import special
from scipy import stats as scipy_stats

from tripletloop.evaluation import MetricsReport, PathologyMetrics, build_report
from tripletloop.stats import (
    MismatchedReportsError,
    compare_reports,
    paired_t_test,
    regularized_incomplete_beta,
    render_comparison_table,
    student_t_cdf,
    student_t_two_sided_p,
)

from util import make_random_partition


def _df2_cdf(t):
    return 0.5 + t / (2.0 * math.sqrt(t * t + 2.0))


class TestIncompleteBeta:
    def test_boundaries(self):
        assert regularized_incomplete_beta(2.0, 3.0, 0.0) == 0.0
        assert regularized_incomplete_beta(2.0, 3.0, 1.0) == 1.0

    def test_against_scipy_within_tolerance(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            a = float(rng.uniform(0.5, 40))
            b = float(rng.uniform(0.5, 40))
            x = float(rng.random())
            ours = regularized_incomplete_beta(a, b, x)
            assert ours == pytest.approx(float(special.betainc(a, b, x)), abs=1e-12)

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            regularized_incomplete_beta(0.0, 1.0, 0.5)


class TestStudentTCdf:
    def test_agrees_with_df2_closed_form(self):
        for t in np.linspace(-10, 10, 81):
            assert student_t_cdf(float(t), 2) == pytest.approx(_df2_cdf(float(t)), abs=1e-10)

    def test_agrees_with_scipy_other_dfs(self):
        for df in (1, 3, 5, 13, 40):
            for t in np.linspace(-6, 6, 25):
                assert student_t_cdf(float(t), df) == pytest.approx(
                    float(scipy_stats.t.cdf(t, df)), abs=1e-12
                )

    def test_p_monotone_decreasing_in_abs_t(self):
        for df in (2, 13):
            ts = np.linspace(0.1, 12, 60)
            ps = [student_t_two_sided_p(float(t), df) for t in ts]
            assert all(p1 > p2 for p1, p2 in zip(ps, ps[1:]))

    def test_p_in_unit_interval(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            t = float(rng.normal(scale=20))
            df = int(rng.integers(1, 60))
            p = student_t_two_sided_p(t, df)
            assert 0.0 <= p <= 1.0


class TestPairedTTest:
    def test_identical_vectors_degenerate(self):
        res = paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert res.t_statistic == 0.0
        assert res.p_value == 1.0
        assert res.degenerate
        assert res.degrees_of_freedom == 2

    def test_simple_case_closed_form(self):
        res = paired_t_test([1, 2, 3], [0, 0, 0])
        assert res.t_statistic == pytest.approx(3.4641, abs=1e-3)
        assert res.degrees_of_freedom == 2
        assert res.p_value == pytest.approx(0.0742, abs=1e-3)

    def test_antisymmetry(self):
        a = [4.0, 7.0, 1.5, 9.0]
        b = [3.0, 8.0, 2.5, 5.0]
        fwd = paired_t_test(a, b)
        rev = paired_t_test(b, a)
        assert rev.t_statistic == -fwd.t_statistic
        assert rev.p_value == fwd.p_value

    def test_constant_shift_invariance(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=10)
        b = rng.normal(size=10)
        base = paired_t_test(a, b)
        shifted = paired_t_test(a + 17.5, b + 17.5)
        assert shifted.t_statistic == pytest.approx(base.t_statistic, rel=1e-12)
        assert shifted.p_value == pytest.approx(base.p_value, rel=1e-12)

    def test_zero_spread_nonzero_mean(self):
        res = paired_t_test([2.0, 3.0, 4.0], [1.0, 2.0, 3.0])
        assert math.isinf(res.t_statistic) and res.t_statistic > 0
        assert res.p_value == 0.0
        assert res.degenerate

    def test_matches_scipy_on_random_vectors(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(2, 30))
            a = rng.normal(size=n) * 10
            b = rng.normal(size=n) * 10
            ours = paired_t_test(a, b)
            ref = scipy_stats.ttest_rel(a, b)
            assert ours.t_statistic == pytest.approx(float(ref.statistic), rel=1e-9)
            assert ours.p_value == pytest.approx(float(ref.pvalue), rel=1e-9)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            paired_t_test([1.0], [2.0])
        with pytest.raises(ValueError):
            paired_t_test([1.0, 2.0], [1.0, 2.0, 3.0])


def _report_from_rows(rows, split_id="split"):
    return MetricsReport(rows, {"split_id": split_id, "timestamp": "now"})


def _row(name, tp, fp, tn, fn):
    ppv_def = tp + fp > 0
    npv_def = tn + fn > 0
    return PathologyMetrics(
        name, tp, fp, tn, fn,
        100.0 * tp / (tp + fp) if ppv_def else 0.0,
        100.0 * tn / (tn + fn) if npv_def else 0.0,
        not ppv_def, not npv_def,
    )


class TestCompareReports:
    def test_identical_reports_all_zero_deltas(self):
        rng = np.random.default_rng(4)
        report = build_report(make_random_partition(rng, min_tp=1, min_tn=1), {"split_id": "s"})
        comparison = compare_reports(report, report)
        assert all(d["ppv_delta"] == 0.0 and d["npv_delta"] == 0.0 for d in comparison["deltas"])
        for metric in ("ppv", "npv"):
            result = comparison["t_tests"][metric]["result"]
            assert result["p_value"] == 1.0 and result["degenerate"]

    def test_deltas_match_subtraction_oracle(self):
        rng = np.random.default_rng(5)
        before = build_report(make_random_partition(rng, min_tp=1, min_tn=1), {"split_id": "s"})
        after = build_report(make_random_partition(rng, min_tp=1, min_tn=1), {"split_id": "s"})
        comparison = compare_reports(before, after)
        for d in comparison["deltas"]:
            rb, ra = before.row(d["pathology"]), after.row(d["pathology"])
            assert d["ppv_delta"] == ra.ppv - rb.ppv
            assert d["npv_delta"] == ra.npv - rb.npv

    def test_single_pathology_test_unavailable_but_deltas_present(self):
        before = _report_from_rows([_row("Edema", 5, 5, 5, 5)])
        after = _report_from_rows([_row("Edema", 8, 2, 8, 2)])
        comparison = compare_reports(before, after)
        assert len(comparison["deltas"]) == 1
        for metric in ("ppv", "npv"):
            assert comparison["t_tests"][metric]["result"] is None
            assert "2" in comparison["t_tests"][metric]["error"]

    def test_undefined_cells_excluded_pairwise(self):
        before = _report_from_rows([
            _row("Edema", 0, 0, 5, 5), _row("Pneumonia", 4, 4, 4, 4), _row("Fracture", 3, 1, 6, 2),
        ])
        after = _report_from_rows([
            _row("Edema", 2, 1, 6, 4), _row("Pneumonia", 5, 3, 5, 3), _row("Fracture", 3, 1, 7, 1),
        ])
        comparison = compare_reports(before, after)
        assert comparison["t_tests"]["ppv"]["excluded"] == ["Edema"]
        assert comparison["t_tests"]["ppv"]["pathologies"] == ["Pneumonia", "Fracture"]
        assert comparison["t_tests"]["npv"]["excluded"] == []

    def test_mismatched_pathologies_rejected(self):
        a = _report_from_rows([_row("Edema", 1, 1, 1, 1)])
        b = _report_from_rows([_row("Pneumonia", 1, 1, 1, 1)])
        with pytest.raises(MismatchedReportsError):
            compare_reports(a, b)

    def test_mismatched_splits_rejected(self):
        a = _report_from_rows([_row("Edema", 1, 1, 1, 1)], split_id="s1")
        b = _report_from_rows([_row("Edema", 1, 1, 1, 1)], split_id="s2")
        with pytest.raises(MismatchedReportsError):
            compare_reports(a, b)

    def test_document_is_deterministic_and_timestamp_free(self):
        rng = np.random.default_rng(6)
        part = make_random_partition(rng, min_tp=1, min_tn=1)
        before = build_report(part, {"split_id": "s", "timestamp": "t1"})
        after = build_report(part, {"split_id": "s", "timestamp": "t2"})
        c1 = json.dumps(compare_reports(before, after), sort_keys=True)
        before2 = build_report(part, {"split_id": "s", "timestamp": "other"})
        after2 = build_report(part, {"split_id": "s", "timestamp": "another"})
        c2 = json.dumps(compare_reports(before2, after2), sort_keys=True)
        assert c1 == c2
        assert "timestamp" not in c1

    def test_render_smoke(self):
        rng = np.random.default_rng(7)
        part = make_random_partition(rng, min_tp=1, min_tn=1)
        comparison = compare_reports(
            build_report(part, {"split_id": "s"}), build_report(part, {"split_id": "s"})
        )
        table = render_comparison_table(comparison)
        assert "paired t-test" in table

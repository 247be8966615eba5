from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tripletloop.data import PATHOLOGIES
from tripletloop.evaluation import (
    CELLS,
    ConfusionPartition,
    InferenceRecord,
    MetricsReport,
    build_report,
    cell_for,
    compute_npv,
    compute_ppv,
    partition_confusion,
    render_report_table,
    run_inference,
)
from tripletloop.models import ClassifierHead, ConvBackbone, build_classifier

from util import make_random_partition, make_random_records


class TestCellAssignment:
    @pytest.mark.parametrize(
        "decision,truth,cell",
        [
            ("positive", "positive", "TP"),
            ("positive", "negative", "FP"),
            ("negative", "negative", "TN"),
            ("negative", "positive", "FN"),
        ],
    )
    def test_cell_table(self, decision, truth, cell):
        assert cell_for(decision, truth) == cell


class TestRunInference:
    def _all_negative_model(self):
        model = build_classifier(ConvBackbone(feature_dim=64), ClassifierHead(64))
        with torch.no_grad():
            model.head.linear.weight.zero_()
            model.head.linear.bias.fill_(-5.0)
        return model

    def test_one_record_per_image_pathology(self, small_records):
        model = self._all_negative_model()
        records = run_inference(model, small_records[:10])
        assert len(records) == 10 * 14

    def test_cells_follow_truth_for_all_negative_decisions(self, small_records):
        model = self._all_negative_model()
        for rec in run_inference(model, small_records[:10]):
            assert rec.decision == "negative"
            assert rec.cell == ("FN" if rec.truth == "positive" else "TN")


class TestPartitionConfusion:
    def test_all_correct_records_leave_failures_empty(self):
        records = [
            InferenceRecord("a", "Edema", 0.9, "positive", "positive", "TP"),
            InferenceRecord("b", "Edema", 0.1, "negative", "negative", "TN"),
        ]
        part = partition_confusion(records)
        assert part.failed("Edema") == []

    def test_single_fn_failed_set(self):
        records = [InferenceRecord("a", "Edema", 0.2, "negative", "positive", "FN")]
        part = partition_confusion(records)
        assert part.failed("Edema") == ["a"]

    def test_duplicate_record_rejected(self):
        rec = InferenceRecord("a", "Edema", 0.2, "negative", "positive", "FN")
        with pytest.raises(ValueError, match="duplicate"):
            partition_confusion([rec, rec])

    def test_sizes_match_brute_force_recount(self):
        rng = np.random.default_rng(0)
        records = make_random_records(rng, 200)
        part = partition_confusion(records)
        expected = Counter((r.pathology, r.cell) for r in records)
        for name in PATHOLOGIES:
            for cell in CELLS:
                assert len(part.ids(name, cell)) == expected[(name, cell)]

    @given(st.integers(0, 2**32 - 1), st.integers(1, 60))
    @settings(max_examples=60, deadline=None)
    def test_partition_disjoint_and_exhaustive(self, seed, n_images):
        rng = np.random.default_rng(seed)
        records = make_random_records(rng, n_images)
        part = partition_confusion(records)
        part.validate()
        for name in PATHOLOGIES:
            total = sum(len(part.ids(name, c)) for c in CELLS)
            assert total == n_images


class TestMetrics:
    def test_ppv_simple(self):
        value = compute_ppv(8, 2)
        assert value.value == pytest.approx(80.0)
        assert not value.undefined

    def test_npv_zero_denominator_flagged(self):
        value = compute_npv(0, 0)
        assert value.value == 0.0
        assert value.undefined

    def test_ppv_display_precision_case(self):
        assert compute_ppv(8863, 1137).value == pytest.approx(88.63)

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            compute_ppv(-1, 2)
        with pytest.raises(ValueError):
            compute_npv(2, -1)

    def test_fp_to_tn_conversion_monotonicity(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            tp, fp, tn, fn = (int(rng.integers(0, 30)) for _ in range(4))
            fp += 1  # need one FP to convert
            before = compute_ppv(tp, fp).value
            after = compute_ppv(tp, fp - 1).value
            if tp > 0:
                assert after > before
            else:
                assert after >= before

    def test_fn_to_tp_conversion_monotonicity(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            tn, fn = int(rng.integers(0, 30)), int(rng.integers(0, 30)) + 1
            before = compute_npv(tn, fn).value
            after = compute_npv(tn, fn - 1).value
            if tn > 0:
                assert after > before
            else:
                assert after >= before


class TestBuildReport:
    def test_empty_pathology_flagged(self):
        part = ConfusionPartition.empty()
        report = build_report(part)
        row = report.row("Edema")
        assert row.tp == row.fp == row.tn == row.fn == 0
        assert row.ppv_undefined and row.npv_undefined

    def test_matches_hand_computation(self):
        rng = np.random.default_rng(3)
        part = make_random_partition(rng)
        report = build_report(part)
        for name in PATHOLOGIES:
            counts = part.counts(name)
            row = report.row(name)
            if counts["TP"] + counts["FP"] > 0:
                assert row.ppv == pytest.approx(
                    100.0 * counts["TP"] / (counts["TP"] + counts["FP"]), abs=1e-9
                )
            if counts["TN"] + counts["FN"] > 0:
                assert row.npv == pytest.approx(
                    100.0 * counts["TN"] / (counts["TN"] + counts["FN"]), abs=1e-9
                )

    def test_serialization_round_trip(self):
        rng = np.random.default_rng(4)
        report = build_report(make_random_partition(rng), {"split_id": "s", "timestamp": "t"})
        back = MetricsReport.from_dict(report.to_dict())
        assert back.to_dict() == report.to_dict()

    def test_reorder_invariance(self):
        rng = np.random.default_rng(5)
        records = make_random_records(rng, 40)
        shuffled = list(records)
        rng.shuffle(shuffled)
        a = build_report(partition_confusion(records))
        b = build_report(partition_confusion(shuffled))
        assert a.to_dict() == b.to_dict()

    def test_all_fourteen_present_and_rendered(self):
        report = build_report(ConfusionPartition.empty())
        assert report.pathology_names() == list(PATHOLOGIES)
        table = render_report_table(report)
        for name in PATHOLOGIES:
            assert name in table
        assert "0.00*" in table

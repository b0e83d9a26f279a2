import numpy as np
import pytest
from models.metrics import (ConfusionCounts, EmptyRule, MetricsRecord, aggregate, binarize, confusion,
                            evaluate_predictions, hard_metrics)
from tests.data import record, record_matrix
from utils.errors import InvalidParameterError, ShapeError


def _brute_force(pred, target):
    tp = tn = fp = fn = 0
    for p, t in zip(pred.ravel(), target.ravel()):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


class TestConfusion:
    """Test suite for thresholding and confusion counts"""

    def test_threshold_is_inclusive(self):
        np.testing.assert_array_equal(binarize(np.array([0.49, 0.5, 0.51])), [0, 1, 1])
        np.testing.assert_array_equal(binarize(np.array([0.2, 0.3]), tau=0.25), [0, 1])

    def test_threshold_range(self):
        with pytest.raises(InvalidParameterError):
            binarize(np.zeros(3), tau=1.0)

    def test_perfect_prediction(self):
        target = np.zeros((4, 4), dtype=np.uint8)
        target[0, :4] = 1
        target[1, 0] = 1
        c = confusion(target, target)
        assert (c.tp, c.tn, c.fp, c.fn) == (5, 11, 0, 0)
        assert hard_metrics(c)[2] == pytest.approx(1.0, abs=1e-5)

    def test_complement_prediction(self):
        target = np.zeros((4, 4), dtype=np.uint8)
        target[:, 0] = 1
        c = confusion(1 - target, target)
        assert (c.tp, c.tn, c.fp, c.fn) == (0, 0, 12, 4)
        assert hard_metrics(c) == (0.0, 0.0, 0.0)

    def test_counts_match_brute_force(self):
        """Test 1000 random 16x16 pairs against an elementwise count"""
        gen = np.random.default_rng(77)
        for _ in range(1000):
            pred = (gen.random((16, 16)) < gen.random()).astype(np.uint8)
            target = (gen.random((16, 16)) < gen.random()).astype(np.uint8)
            c = confusion(pred, target)
            assert (c.tp, c.tn, c.fp, c.fn) == _brute_force(pred, target)
            assert c.total == 256

    def test_shape_and_binarity_checked(self):
        with pytest.raises(ShapeError):
            confusion(np.zeros((4, 4)), np.zeros((4, 5)))
        with pytest.raises(InvalidParameterError):
            confusion(np.full((4, 4), 2), np.zeros((4, 4)))


class TestHardMetrics:
    """Test suite for sensitivity, specificity and Dice"""

    def test_reference_counts(self):
        sens, spec, dice = hard_metrics(ConfusionCounts(tp=3, tn=10, fp=1, fn=2))
        assert sens == pytest.approx(0.6, abs=1e-5)
        assert spec == pytest.approx(10.0 / 11.0, abs=1e-5)
        assert dice == pytest.approx(6.0 / 9.0, abs=1e-5)

    def test_empty_prediction_and_target(self):
        for rule in EmptyRule:
            assert hard_metrics(ConfusionCounts(0, 16, 0, 0), empty_rule=rule) == (1.0, 1.0, 1.0)

    def test_empty_prediction_missing_lesion(self):
        """Test the lenient rule rewards an empty prediction and the strict rule does not"""
        missed = ConfusionCounts(tp=0, tn=12, fp=0, fn=4)
        assert hard_metrics(missed, empty_rule="lenient") == (1.0, 1.0, 1.0)
        sens, spec, dice = hard_metrics(missed, empty_rule="strict")
        assert sens == 0.0 and dice == 0.0
        assert spec == pytest.approx(1.0, abs=1e-5)

    def test_unknown_rule(self):
        with pytest.raises(InvalidParameterError):
            hard_metrics(ConfusionCounts(1, 1, 1, 1), empty_rule="loose")

    def test_per_slice_averaging(self):
        """Test a perfect slice and a fully wrong slice average to one half"""
        target = np.zeros((4, 4), dtype=np.uint8)
        target[0, 0] = 1
        sens, _, dice = evaluate_predictions([target.astype(float), (1 - target).astype(float)], [target, target])
        assert dice == pytest.approx(0.5, abs=1e-5)
        assert sens == pytest.approx(0.5, abs=1e-5)

    def test_evaluate_needs_slices(self):
        with pytest.raises(InvalidParameterError):
            evaluate_predictions([], [])


class TestRecords:
    """Test suite for metric records and their CSV rows"""

    def test_from_fractions_scales_to_percent(self):
        labels = {"experiment": "lung-segmentation", "architecture": "Unet", "encoder": "vgg-like",
                  "weight_init": "random"}
        r = MetricsRecord.from_fractions(labels, 0.5, 0.99, 0.8125, 1234567, 0.25, 0.125)
        assert (r.sens, r.spec, r.dice) == pytest.approx((50.0, 99.0, 81.25))
        assert r.params_millions == pytest.approx(1.234567)
        assert r.ok

    def test_row_round_trip(self):
        original = record(dice=81.256, sens=70.0, spec=99.5, params_millions=0.123456, train_s_per_batch=0.5)
        header = ["experiment", "architecture", "encoder", "weight_init", "sens", "spec", "dice",
                  "params_millions", "train_s_per_batch", "val_s_per_batch", "status"]
        row = original.to_row()
        assert row[6] == "81.26"
        again = MetricsRecord.from_row(dict(zip(header, row)))
        assert again.dice == pytest.approx(81.26)
        assert again.params_millions == original.params_millions
        assert again.status == "ok"

    def test_failed_record(self):
        failed = MetricsRecord.failed({"experiment": "e", "architecture": "a", "encoder": "c", "weight_init": "w"},
                                      "boom")
        assert not failed.ok and failed.error == "boom"


class TestAggregate:
    """Test suite for grouping, means and sample standard deviations"""

    def test_mean_and_sample_std(self):
        rows = aggregate([record(dice=80.0), record(dice=90.0)], "architecture")
        assert len(rows) == 1
        assert rows[0].mean["dice"] == pytest.approx(85.0)
        assert rows[0].std["dice"] == pytest.approx(7.0711, abs=1e-4)
        assert rows[0].n == 2 and not rows[0].single

    def test_group_by_architecture(self):
        rows = aggregate(record_matrix(), "architecture")
        assert [row.key for row in rows] == [("Unet",), ("Linknet",), ("FPN",), ("PSPNet",)]
        assert all(row.n == 12 for row in rows)

    def test_group_by_pair(self):
        rows = aggregate(record_matrix(), ("experiment", "weight_init"))
        assert len(rows) == 6
        assert rows[0].label == "lung-segmentation/random"

    def test_failed_records_ignored(self):
        records = [record(dice=60.0), record(dice=0.0, status="failed")]
        rows = aggregate(records, "encoder")
        assert rows[0].n == 1 and rows[0].single
        assert rows[0].std["dice"] == 0.0

    def test_five_number_summary(self):
        rows = aggregate([record(dice=float(d)) for d in range(1, 6)], "experiment")
        summary = rows[0].summary["dice"]
        assert (summary.minimum, summary.median, summary.maximum) == (1.0, 3.0, 5.0)
        assert (summary.q1, summary.q3) == (2.0, 4.0)

    def test_no_ok_records(self):
        with pytest.raises(InvalidParameterError):
            aggregate([record(status="failed")], "architecture")

    def test_unknown_field(self):
        with pytest.raises(InvalidParameterError):
            aggregate(record_matrix(), "dice")

import numpy as np
import pytest

from dmt.metrics import (
    AUC_THRESHOLDS,
    EvalRecord,
    MetricError,
    MetricReport,
    auc,
    ciou,
    detection_confidence,
    evaluate_records,
    make_records,
    map_mse,
    max_f1_ap,
    normalize_map,
    sample_iou,
)
from dmt.synthworld import make_pair
from lab.oracles import brute_force_pr


def record(k, iou_fp_conf):
    _, fp, conf = iou_fp_conf
    return EvalRecord(k, np.zeros((1, 1)), np.ones((1, 1)), fp, None, conf)


class TestLocalization:
    def test_sample_iou_count(self):
        gt = np.zeros((4, 4))
        gt[0:2, :] = 1
        pred = np.zeros((4, 4))
        pred[1:3, 0:2] = 1
        assert sample_iou(pred, gt, 0.6) == pytest.approx(0.2)

    def test_sample_iou_matches_pixel_loop(self, rng):
        for _ in range(100):
            pred = rng.normal(size=(5, 5))
            gt = (rng.random((5, 5)) < 0.4).astype(float)
            gt[2, 2] = 1
            norm = normalize_map(pred)
            inter = sum(norm[y, x] >= 0.6 and gt[y, x] == 1 for y in range(5) for x in range(5))
            union = sum(norm[y, x] >= 0.6 or gt[y, x] == 1 for y in range(5) for x in range(5))
            assert sample_iou(pred, gt, 0.6) == inter / union

    def test_empty_gt_on_genuine_sample(self):
        with pytest.raises(MetricError):
            sample_iou(np.zeros((2, 2)), np.zeros((2, 2)))

    def test_constant_map_normalizes_to_half(self):
        np.testing.assert_array_equal(normalize_map(np.full((3, 3), 0.2)), 0.5)

    def test_ciou_inclusive(self):
        assert ciou([0.6, 0.4, 0.5, 0.7], 0.5) == 0.75

    def test_ciou_monotone(self, rng):
        ious = rng.random(100)
        values = [ciou(ious, t) for t in np.linspace(0, 1, 51)]
        assert values == sorted(values, reverse=True)

    def test_auc_hand_case(self):
        assert auc([1.0, 0.0]) == pytest.approx(0.5)

    def test_auc_perfect(self):
        assert auc([1.0, 1.0]) == pytest.approx(1.0)
        assert len(AUC_THRESHOLDS) == 19

    def test_mse_pixel_loop(self, rng):
        pred = rng.uniform(-1, 1, size=(4, 4))
        gt = (rng.random((4, 4)) < 0.5).astype(float)
        norm = (pred - pred.min()) / (pred.max() - pred.min())
        expected = sum((norm[y, x] - gt[y, x]) ** 2 for y in range(4) for x in range(4)) / 16
        assert map_mse(pred, gt) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_localization_ignores_positive_affine_maps(self, seed):
        rng = np.random.default_rng(seed)
        for _ in range(25):
            pred = rng.normal(size=(6, 6))
            gt = (rng.random((6, 6)) < 0.3).astype(float)
            gt[0, 0] = 1
            a, b = rng.uniform(0.1, 10.0), rng.uniform(-5.0, 5.0)
            moved = a * pred + b
            np.testing.assert_allclose(normalize_map(moved), normalize_map(pred), atol=1e-12)
            assert sample_iou(moved, gt) == sample_iou(pred, gt)
            assert map_mse(moved, gt) == pytest.approx(map_mse(pred, gt), abs=1e-12)

    def test_empty_record_sets(self):
        with pytest.raises(MetricError):
            ciou([], 0.5)
        with pytest.raises(MetricError):
            auc([])
        with pytest.raises(MetricError):
            evaluate_records([])


class TestDetection:
    HAND = [(0.8, False, 0.9), (0.3, False, 0.8), (0.0, True, 0.7), (0.0, True, 0.1)]

    def test_hand_case_matches_exhaustive_sweep(self):
        ious = [h[0] for h in self.HAND]
        records = [record(k, h) for k, h in enumerate(self.HAND)]
        max_f1, ap, curve, _ = max_f1_ap(records, ious=np.array(ious))
        precision, recall, f1, bf_f1, bf_ap = brute_force_pr(ious, [h[1] for h in self.HAND], [h[2] for h in self.HAND])
        np.testing.assert_allclose(curve.recall, recall)
        np.testing.assert_allclose(curve.precision, precision)  # nan positions must agree too
        np.testing.assert_allclose(curve.f1, f1)
        assert max_f1 == pytest.approx(bf_f1)
        assert ap == pytest.approx(bf_ap)

    def test_hand_case_values(self):
        ious = np.array([h[0] for h in self.HAND])
        max_f1, _, _, fp_acc = max_f1_ap([record(k, h) for k, h in enumerate(self.HAND)], ious=ious)
        # First maximum sits at 0.71: both genuine samples detected, P = 1/2, R = 1
        assert max_f1 == pytest.approx(2 / 3)
        # Only the poorly localized detection counts as wrong
        assert fp_acc == pytest.approx(0.75)

    def test_no_genuine_samples(self):
        records = [record(k, (0.0, True, 0.5)) for k in range(3)]
        max_f1, ap, _, _ = max_f1_ap(records, ious=np.zeros(3))
        assert max_f1 == 0.0 and ap == 0.0

    def test_confidence_from_raw_cosine(self):
        assert detection_confidence(np.array([[-1.0, 0.5]])) == pytest.approx(0.75)

    def test_random_instances_match_sweep(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 8))
            ious = rng.random(n).round(2)
            fps = list(rng.random(n) < 0.3)
            confs = list(rng.random(n))
            records = [EvalRecord(k, np.zeros((1, 1)), np.ones((1, 1)), fp, None, c)
                       for k, (fp, c) in enumerate(zip(fps, confs))]
            max_f1, ap, _, _ = max_f1_ap(records, ious=ious)
            _, _, _, bf_f1, bf_ap = brute_force_pr(list(ious), fps, confs)
            assert max_f1 == pytest.approx(bf_f1, abs=1e-12)
            assert ap == pytest.approx(bf_ap, abs=1e-12)


class TestReport:
    def test_genuine_only_localization(self, world, rng):
        pairs = [make_pair(0, k, world, "test", 0.3) for k in range(20)]
        maps = rng.uniform(-1, 1, size=(20, 16, 16))
        report = evaluate_records(make_records(pairs, maps))
        genuine = [k for k, p in enumerate(pairs) if not p.is_false_positive]
        expected = ciou([sample_iou(maps[k], pairs[k].gt) for k in genuine], 0.5)
        assert report.ciou == expected
        assert report.n_records == 20
        assert sum(b["count"] for b in report.bands.values()) == len(genuine)

    def test_text_form(self, world, rng):
        pairs = [make_pair(0, k, world, "test", 0.0) for k in range(6)]
        report = evaluate_records(make_records(pairs, rng.uniform(-1, 1, size=(6, 16, 16))))
        parsed = MetricReport.from_text(report.to_text())
        assert parsed.ciou == report.ciou and parsed.ap == report.ap
        assert set(parsed.bands) == set(report.bands)

    def test_pairs_without_gt(self, world):
        from dataclasses import replace
        pair = replace(make_pair(0, 0, world, "unlabeled", 0.0), gt=None)
        with pytest.raises(MetricError):
            make_records([pair], np.zeros((1, 16, 16)))

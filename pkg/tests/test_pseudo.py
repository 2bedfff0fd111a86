from dataclasses import replace

import numpy as np
import pytest

from dmt.pipeline import LocalizationNet
from dmt.pseudo import (
    GROUND_TRUTH,
    PSEUDO,
    PseudoLabelError,
    binarize,
    build_mixed,
    consensus,
    make_ipl,
    map_iou,
    mixed_batches,
    noise_filter,
)
from dmt.synthworld import make_pair
from dmt.trainer import pseudo_label_quality


class FixedTeacher:
    """Stands in for a network: returns the same map for every pair"""

    def __init__(self, m):
        self.m = np.asarray(m, dtype=float)

    def predict(self, pairs):
        return np.stack([self.m for _ in pairs])


class RandomTeacher:
    """Uniform random maps in [-1, 1]"""

    def __init__(self, seed, size=4):
        self.rng = np.random.default_rng(seed)
        self.size = size

    def predict(self, pairs):
        return self.rng.uniform(-1.0, 1.0, size=(len(pairs), self.size, self.size))


class GroundTruthTeacher:
    """Predicts +1 inside the (augmented) ground truth and -1 elsewhere"""

    def predict(self, pairs):
        return np.stack([2.0 * p.gt - 1.0 for p in pairs])


def unlabeled(world, n, fp_rate=0.0):
    return [replace(make_pair(0, k, world, "unlabeled", fp_rate), gt=None) for k in range(n)]


class TestMasks:
    def test_binarize_threshold_inclusive(self):
        np.testing.assert_array_equal(binarize(np.array([0.59, 0.6, 0.61]), 0.6), [0, 1, 1])

    def test_binarize_delta_range(self):
        with pytest.raises(PseudoLabelError):
            binarize(np.zeros(3), 1.0)

    def test_iou_hand_case(self):
        m1 = np.array([[1.0, 1.0], [0.0, 0.0]])
        m2 = np.array([[0.0, 1.0], [0.0, 1.0]])
        assert map_iou(m1, m2) == pytest.approx(1 / 3)

    def test_iou_of_empty_masks(self):
        assert map_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    def test_iou_shape_mismatch(self):
        with pytest.raises(PseudoLabelError):
            map_iou(np.zeros((2, 2)), np.zeros((3, 3)))

    def test_ipl_is_contained_in_both(self, rng):
        for _ in range(100):
            a = (rng.random((5, 5)) < 0.5).astype(float)
            b = (rng.random((5, 5)) < 0.5).astype(float)
            ipl = make_ipl(a, b)
            assert np.all(ipl <= a) and np.all(ipl <= b)
            np.testing.assert_array_equal(ipl, np.logical_and(a, b))

    def test_consensus_monotone_in_tau(self, rng):
        a = [(rng.random((4, 4)) < 0.5).astype(float) for _ in range(100)]
        b = [(rng.random((4, 4)) < 0.5).astype(float) for _ in range(100)]
        counts = [sum(acc for _, acc in consensus(a, b, tau)) for tau in np.linspace(0, 1, 11)]
        assert counts == sorted(counts, reverse=True)
        assert counts[0] == 100


class TestNoiseFilter:
    def test_agreeing_teachers_accept(self, small_world, rng):
        m = np.full((4, 4), -1.0)
        m[:2, :2] = 0.9
        result = noise_filter(unlabeled(small_world, 5), FixedTeacher(m), FixedTeacher(m), 0.6, 0.7,
                              small_world, rng, weak_augment=False)
        assert result.n_accepted == 5
        for _, label in result.accepted:
            np.testing.assert_array_equal(label, (m >= 0.6).astype(float))

    def test_disagreeing_teachers_reject(self, small_world, rng):
        ma, mb = np.full((4, 4), -1.0), np.full((4, 4), -1.0)
        ma[0, :] = 0.9
        mb[3, :] = 0.9
        result = noise_filter(unlabeled(small_world, 4), FixedTeacher(ma), FixedTeacher(mb), 0.6, 0.7,
                              small_world, rng, weak_augment=False)
        assert result.n_accepted == 0
        assert all(d.iou == 0.0 and not d.accepted for d in result.decisions)

    def test_filter_off_accepts_everything_but_drops_empty_ipl(self, small_world, rng):
        ma, mb = np.full((4, 4), -1.0), np.full((4, 4), -1.0)
        ma[0, :] = 0.9
        mb[3, :] = 0.9
        result = noise_filter(unlabeled(small_world, 4), FixedTeacher(ma), FixedTeacher(mb), 0.6, 0.7,
                              small_world, rng, use_filter=False, weak_augment=False)
        assert all(d.passes_consensus for d in result.decisions)
        # Intersection is empty, so nothing reaches the pool
        assert result.n_accepted == 0
        assert not any(d.accepted for d in result.decisions)

    def test_ipl_off_uses_teacher_a(self, small_world, rng):
        ma, mb = np.full((4, 4), -1.0), np.full((4, 4), -1.0)
        ma[0, :] = 0.9
        mb[0, :2] = 0.9
        result = noise_filter(unlabeled(small_world, 2), FixedTeacher(ma), FixedTeacher(mb), 0.6, 0.5,
                              small_world, rng, use_ipl=False, weak_augment=False)
        assert result.n_accepted == 2
        np.testing.assert_array_equal(result.accepted[0][1], (ma >= 0.6).astype(float))

    def test_single_teacher_accepts_without_consensus(self, small_world, rng):
        m = np.full((4, 4), -1.0)
        m[1, 1] = 0.9
        result = noise_filter(unlabeled(small_world, 3), FixedTeacher(m), None, 0.6, 0.99, small_world, rng,
                              weak_augment=False)
        assert all(d.accepted and d.iou == 1.0 for d in result.decisions)

    def test_labels_return_to_original_frame(self, small_world):
        m = np.full((4, 4), -1.0)
        m[:, 0] = 0.9
        pairs = unlabeled(small_world, 30)
        result = noise_filter(pairs, FixedTeacher(m), FixedTeacher(m), 0.6, 0.7, small_world,
                              np.random.default_rng(0))
        # Flipped views put the teachers' column on the right once mapped back
        columns = {int(np.nonzero(label.any(axis=0))[0].max()) for _, label in result.accepted}
        assert 3 in columns

    def test_acceptance_rates_by_group(self, small_world, rng):
        m = np.full((4, 4), -1.0)
        m[0, 0] = 0.9
        pairs = unlabeled(small_world, 40, fp_rate=0.5)
        result = noise_filter(pairs, FixedTeacher(m), FixedTeacher(m), 0.6, 0.7, small_world, rng,
                              weak_augment=False)
        assert result.acceptance_rate(false_positive=True) == 1.0
        assert result.acceptance_rate(false_positive=False) == 1.0

    def test_empty_input(self, small_world, rng):
        net = LocalizationNet("t", "A", small_world, 4, 0)
        result = noise_filter([], net, net, 0.6, 0.7, small_world, rng)
        assert result.n_accepted == 0
        assert np.isnan(result.acceptance_rate(false_positive=True))

    def test_empty_masks_on_false_positives_are_not_accepted(self, small_world, rng):
        silent = np.full((4, 4), -1.0)
        pairs = unlabeled(small_world, 20, fp_rate=1.0)
        assert all(p.is_false_positive for p in pairs)
        result = noise_filter(pairs, FixedTeacher(silent), FixedTeacher(silent), 0.6, 0.7, small_world, rng)
        # Two empty masks agree perfectly but leave nothing to train on
        assert all(d.iou == 1.0 and d.passes_consensus for d in result.decisions)
        assert result.n_accepted == 0
        assert result.acceptance_rate(false_positive=True) == 0.0

    @pytest.mark.parametrize("tau", [0.0, 0.2, 0.4, 0.7])
    @pytest.mark.parametrize("use_ipl", [True, False])
    def test_decisions_are_consistent_with_stored_masks(self, small_world, tau, use_ipl):
        rng = np.random.default_rng(int(tau * 10) + 100 * use_ipl)
        result = noise_filter(unlabeled(small_world, 120, fp_rate=0.3), RandomTeacher(1), RandomTeacher(2),
                              0.2, tau, small_world, rng, use_ipl=use_ipl)
        assert len(result.decisions) == 120
        assert result.n_accepted == sum(d.accepted for d in result.decisions)
        pool = {pair.sample_id: label for pair, label in result.accepted}
        for d in result.decisions:
            assert d.iou == pytest.approx(map_iou(d.mask_a, d.mask_b))
            assert d.passes_consensus == (d.iou >= tau)
            assert d.accepted == (d.sample_id in pool)
            if d.accepted:
                assert d.passes_consensus and d.pseudo_label.any()
                np.testing.assert_array_equal(d.pseudo_label, pool[d.sample_id])
                if use_ipl:
                    np.testing.assert_array_equal(d.pseudo_label, d.ipl_original)
            else:
                assert d.pseudo_label is None


class TestPseudoLabelQuality:
    def perfect_teacher_result(self, world, n, weak_augment):
        world = world.model_copy(update={"size_mix": {"medium": 0.4, "large": 0.3, "huge": 0.3}})
        pairs = [make_pair(0, k, world, "labeled", 0.0) for k in range(n)]
        instrumented = {p.sample_id: p.gt for p in pairs}
        teacher = GroundTruthTeacher()
        result = noise_filter(pairs, teacher, teacher, 0.6, 0.0, world, np.random.default_rng(7),
                              weak_augment=weak_augment)
        return result, instrumented

    def test_perfect_teachers_score_one_without_augmentation(self, world):
        result, instrumented = self.perfect_teacher_result(world, 50, weak_augment=False)
        assert result.n_accepted == 50
        assert pseudo_label_quality(result, instrumented, accepted_only=True) == 1.0
        assert pseudo_label_quality(result, instrumented, accepted_only=False) == 1.0

    def test_unfiltered_quality_is_scored_in_the_original_frame(self, world):
        result, instrumented = self.perfect_teacher_result(world, 200, weak_augment=True)
        accepted = pseudo_label_quality(result, instrumented, accepted_only=True)
        unfiltered = pseudo_label_quality(result, instrumented, accepted_only=False)
        # Flipped views scored against unflipped ground truth would pull this far down
        assert unfiltered > 0.9
        assert unfiltered == pytest.approx(accepted, abs=0.05)
        for d in result.decisions:
            assert d.ipl_original.shape == instrumented[d.sample_id].shape

    def test_rejected_pairs_count_only_when_unfiltered(self, small_world, rng):
        ma, mb = np.full((4, 4), -1.0), np.full((4, 4), -1.0)
        ma[:2, :] = 0.9
        mb[:, :2] = 0.9
        pairs = unlabeled(small_world, 6)
        instrumented = {p.sample_id: (ma > 0).astype(float) * (mb > 0) for p in pairs[:3]}
        result = noise_filter(pairs, FixedTeacher(ma), FixedTeacher(mb), 0.6, 0.9, small_world, rng,
                              weak_augment=False)
        assert result.n_accepted == 0
        assert np.isnan(pseudo_label_quality(result, instrumented, accepted_only=True))
        assert pseudo_label_quality(result, instrumented, accepted_only=False) == 1.0


class TestMixing:
    def test_provenance(self, small_world):
        labeled = [make_pair(0, k, small_world, "labeled", 0.0) for k in range(3)]
        pseudo = [(p, np.ones((4, 4))) for p in unlabeled(small_world, 2)]
        mixed = build_mixed(labeled, pseudo)
        assert [m.provenance for m in mixed] == [GROUND_TRUTH] * 3 + [PSEUDO] * 2

    def test_gt_and_pseudo_label_conflict(self, small_world):
        labeled = make_pair(0, 0, small_world, "labeled", 0.0)
        with pytest.raises(PseudoLabelError):
            build_mixed([], [(labeled, np.ones((4, 4)))])

    def test_labeled_without_gt(self, small_world):
        with pytest.raises(PseudoLabelError):
            build_mixed(unlabeled(small_world, 1), [])

    def test_batches_cover_pool_once(self, small_world, rng):
        labeled = [make_pair(0, k, small_world, "labeled", 0.0) for k in range(7)]
        mixed = build_mixed(labeled, [])
        batches = mixed_batches(mixed, 3, rng)
        assert [len(b) for b in batches] == [3, 3, 1]
        assert sorted(m.pair.sample_id for b in batches for m in b) == list(range(7))

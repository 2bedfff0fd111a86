from dataclasses import replace

import numpy as np
import pytest

from dmt.pseudo import GROUND_TRUTH, PSEUDO, MixedItem
from dmt.synthworld import make_pair, make_splits
from dmt.trainer import (
    TRACE_COLUMNS,
    TrainingError,
    build_bundle,
    ema_params,
    ema_update,
    fuse_maps,
    infer_fused,
    run_unbiased_stage,
    student_step,
    validation_scores,
    warm_up,
)
from lab.app.config import build_config


def snapshot(net):
    return {k: v.copy() for k, v in net.values().items()}


def same(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


class TestBundle:
    def test_students_start_as_teacher_copies(self, tiny_config):
        bundle = build_bundle(tiny_config, 0)
        assert same(snapshot(bundle.teacher_a), snapshot(bundle.student_a))
        assert same(snapshot(bundle.teacher_b), snapshot(bundle.student_b))
        assert bundle.teacher_a.arch.tag == "A" and bundle.teacher_b.arch.tag == "B"

    def test_homogeneous_pair(self, tiny_config):
        config = tiny_config.model_copy(deep=True)
        config.ablation.heterogeneous = False
        bundle = build_bundle(config, 0)
        assert bundle.teacher_b.arch.tag == "A"
        assert not same(snapshot(bundle.teacher_a), snapshot(bundle.teacher_b))

    def test_fused_is_mean_of_teachers(self, tiny_config):
        bundle = build_bundle(tiny_config, 0)
        pairs = [make_pair(0, k, tiny_config.world, "test", 0.0) for k in range(3)]
        expected = (bundle.teacher_a.predict(pairs) + bundle.teacher_b.predict(pairs)) / 2
        np.testing.assert_allclose(infer_fused(bundle, pairs), expected, atol=1e-15)

    def test_fuse_shape_mismatch(self):
        with pytest.raises(TrainingError):
            fuse_maps(np.zeros((1, 4, 4)), np.zeros((1, 3, 3)))

    def test_unknown_source(self, tiny_config):
        with pytest.raises(TrainingError):
            build_bundle(tiny_config, 0).predict([], "teacher_C")


class TestEma:
    def test_hand_arithmetic(self, tiny_config):
        bundle = build_bundle(tiny_config, 0)
        for p in bundle.teacher_a.params:
            p.value = np.ones_like(p.value)
        for p in bundle.student_a.params:
            p.value = np.zeros_like(p.value)
        ema_params(bundle.teacher_a, bundle.student_a, 0.999)
        assert all(np.allclose(p.value, 0.999, atol=1e-15) for p in bundle.teacher_a.params)

    def test_beta_zero_copies_student(self, tiny_config, rng):
        bundle = build_bundle(tiny_config, 0)
        for p in bundle.student_a.params + bundle.student_b.params:
            p.value = rng.normal(size=p.value.shape)
        ema_update(bundle, 0.0)
        assert same(snapshot(bundle.teacher_a), snapshot(bundle.student_a))
        assert same(snapshot(bundle.teacher_b), snapshot(bundle.student_b))

    def test_convexity(self, tiny_config, rng):
        bundle = build_bundle(tiny_config, 0)
        for _ in range(100):
            for p in bundle.student_b.params:
                p.value = rng.normal(size=p.value.shape)
            before = [p.value.copy() for p in bundle.teacher_b.params]
            ema_params(bundle.teacher_b, bundle.student_b, float(rng.random()))
            for old, t, s in zip(before, bundle.teacher_b.params, bundle.student_b.params):
                assert np.all(t.value >= np.minimum(old, s.value) - 1e-15)
                assert np.all(t.value <= np.maximum(old, s.value) + 1e-15)

    def test_beta_range(self, tiny_config):
        bundle = build_bundle(tiny_config, 0)
        with pytest.raises(TrainingError):
            ema_params(bundle.teacher_a, bundle.student_a, 1.5)


class TestStudentStep:
    def test_teachers_untouched(self, tiny_config):
        bundle = build_bundle(tiny_config, 0)
        world = tiny_config.world
        mix = [MixedItem(p, p.gt, GROUND_TRUTH) for p in (make_pair(0, k, world, "labeled", 0.0) for k in range(4))]
        unl = [make_pair(0, 10 + k, world, "test", 0.0) for k in range(4)]
        teachers = snapshot(bundle.teacher_a), snapshot(bundle.teacher_b)
        students = snapshot(bundle.student_a), snapshot(bundle.student_b)
        losses = student_step(bundle, mix, unl, tiny_config, np.random.default_rng(0))
        assert same(teachers[0], snapshot(bundle.teacher_a))
        assert same(teachers[1], snapshot(bundle.teacher_b))
        assert not same(students[0], snapshot(bundle.student_a))
        assert not same(students[1], snapshot(bundle.student_b))
        assert np.isfinite(losses.loss_full) and losses.loss_unsup > 0

    def test_teachers_untouched_over_random_batches(self, tiny_config):
        bundle = build_bundle(tiny_config, 0)
        world = tiny_config.world
        rng = np.random.default_rng(11)
        teachers = snapshot(bundle.teacher_a), snapshot(bundle.teacher_b)
        for step in range(100):
            n_gt, n_pseudo, n_unl = (int(v) for v in rng.integers(0, 4, size=3))
            n_gt = max(n_gt, 1)
            base = 1000 * step
            mix = [MixedItem(p, p.gt, GROUND_TRUTH)
                   for p in (make_pair(step, base + k, world, "labeled", 0.0) for k in range(n_gt))]
            for k in range(n_pseudo):
                pair = replace(make_pair(step, base + 100 + k, world, "unlabeled", 0.3), gt=None)
                mix.append(MixedItem(pair, (rng.random((world.map_size,) * 2) < 0.3).astype(float), PSEUDO))
            unl = [make_pair(step, base + 200 + k, world, "test", 0.3) for k in range(n_unl)]
            student_step(bundle, mix, unl, tiny_config, rng, step=step)
            assert same(teachers[0], snapshot(bundle.teacher_a))
            assert same(teachers[1], snapshot(bundle.teacher_b))

    def test_lambda_zero_skips_contrastive(self, tiny_config):
        config = build_config({**tiny_config.model_dump(), "dmt": {**tiny_config.dmt.model_dump(), "lambda_u": 0.0}})
        bundle = build_bundle(config, 0)
        mix = [MixedItem(p, p.gt, GROUND_TRUTH) for p in (make_pair(0, k, config.world, "labeled", 0.0) for k in range(2))]
        losses = student_step(bundle, mix, [], config, np.random.default_rng(0))
        assert losses.loss_unsup == 0.0

    def test_empty_batch(self, tiny_config):
        with pytest.raises(TrainingError):
            student_step(build_bundle(tiny_config, 0), [], [], tiny_config, np.random.default_rng(0))


class TestStages:
    def test_warm_up_trains_teachers_and_resets_students(self, tiny_config):
        splits = make_splits(tiny_config.world, 0)
        bundle = build_bundle(tiny_config, 0)
        before = snapshot(bundle.teacher_a)
        result = warm_up(bundle, splits.labeled, tiny_config, np.random.default_rng(0), val=splits.val, epochs=2)
        assert len(result.losses) == 2 and len(result.val_ciou) == 2
        assert not same(before, snapshot(bundle.teacher_a))
        assert same(snapshot(bundle.teacher_a), snapshot(bundle.student_a))
        assert bundle.adam_a.step == 0

    def test_warm_up_needs_labels(self, tiny_config):
        with pytest.raises(TrainingError):
            warm_up(build_bundle(tiny_config, 0), [], tiny_config, np.random.default_rng(0))

    def test_unbiased_stage_trace(self, tiny_config):
        splits = make_splits(tiny_config.world, 0)
        bundle = build_bundle(tiny_config, 0)
        seen = []
        bundle, trace = run_unbiased_stage(bundle, splits, tiny_config, np.random.default_rng(0),
                                           callbacks=[seen.append])
        assert [row.epoch for row in trace] == [1, 2]
        assert seen == trace
        assert bundle.epoch == 2
        assert tuple(trace[0].as_row()) == TRACE_COLUMNS
        assert all(0 <= row.n_accepted <= len(splits.unlabeled) for row in trace)

    def test_single_teacher_stage(self, tiny_config):
        config = tiny_config.model_copy(deep=True)
        config.ablation.dual_teachers = False
        splits = make_splits(config.world, 0)
        bundle = build_bundle(config, 0)
        teacher_b = snapshot(bundle.teacher_b)
        run_unbiased_stage(bundle, splits, config, np.random.default_rng(0), epochs=1)
        assert same(teacher_b, snapshot(bundle.teacher_b))

    def test_validation_scores_skip_false_positives(self, tiny_config):
        bundle = build_bundle(tiny_config, 0)
        fps = [make_pair(0, k, tiny_config.world, "test", 1.0) for k in range(3)]
        scores = validation_scores(bundle, fps, tiny_config)
        assert all(np.isnan(v) for v in scores.values())


@pytest.mark.slow
class TestPilot:
    def test_warm_up_reaches_ciou_floor(self):
        config = build_config({})
        splits = make_splits(config.world, 0)
        bundle = build_bundle(config, 0)
        warm_up(bundle, splits.labeled, config, np.random.default_rng([0, 1]))
        assert validation_scores(bundle, splits.val, config, "teacher_A")["ciou"] >= 0.6

"""
Brute-force oracle suite.

Every oracle recomputes a quantity independently (pixel loops, counting,
hand arithmetic, finite differences, closed forms) and compares it with the
library. Pilot oracles train real models and only run with ``slow=True``.
"""
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from dmt.adam import AdamState, adam_step
from dmt.augment import AugOp, AugmentationSpec, transform_map, transform_visual
from dmt.metrics import EvalRecord, auc, ciou, map_mse, max_f1_ap, sample_iou
from dmt.pipeline import (
    attention_pool,
    contrastive_loss,
    contrastive_scores,
    info_nce,
    predicted_map,
    supervised_map_loss,
)
from dmt.pseudo import GROUND_TRUTH, PSEUDO, MixedItem, binarize, consensus, make_ipl, map_iou, mixed_batches
from dmt.synthworld import band_of_area, generate_scene, make_pair, rasterize_box, sample_rng
from dmt.tensor import Parameter, backward, gradient_check, l2_normalize, tmean
from dmt.trainer import build_bundle, ema_params, fuse_maps, student_step
from lab.app.config import ExperimentConfig, WorldConfig, build_config

logger = logging.getLogger(__name__)

# Worked examples with an independent oracle, one entry per example; the registry must cover them all
WORKED_EXAMPLES = (
    "tensor.l2_normalize_hand",
    "tensor.mean_square_grad",
    "tensor.loss_terms_finite_difference",
    "tensor.adam_first_step",
    "world.band_frequencies",
    "world.audio_class_correlation",
    "world.false_positive_count",
    "world.flip_box_coordinates",
    "world.learnability_floor",
    "pipeline.predicted_map_dot_products",
    "pipeline.attention_peak_saturation",
    "pipeline.info_nce_two_term",
    "pipeline.bce_pixel_loop",
    "dmt.warmup_val_ciou",
    "dmt.warmup_loss_moving_average",
    "dmt.binarize_pixel_loop",
    "dmt.map_iou_count",
    "dmt.false_positive_rejection",
    "dmt.ipl_pixel_and",
    "dmt.batch_histogram",
    "dmt.full_loss_finite_difference",
    "dmt.ema_hand_arithmetic",
    "dmt.fused_elementwise_mean",
    "dmt.filter_beats_no_filter",
    "dmt.pseudo_count_trend",
    "metrics.sample_iou_count",
    "metrics.ciou_count",
    "metrics.auc_trapezoid",
    "metrics.mse_pixel_loop",
    "metrics.max_f1_hand_case",
    "harness.stage2_gain",
    "harness.ablation_full_ranks_first",
    "harness.labeled_ratio_trend",
)
PILOT_SEEDS = (0, 1, 2, 3, 4)
MIN_GAIN = 0.02  # absolute CIoU
FP_ACCEPT_GAP = 0.20
RATIO_SLACK = 0.01
FAULT_PERTURBATION = 1e-2
GRAD_TOL = 1e-3

OracleFn = Callable[[bool], Tuple[bool, str]]


@dataclass(frozen=True)
class Oracle:
    name: str
    fn: OracleFn
    slow: bool = False


@dataclass
class OracleResult:
    name: str
    passed: bool
    detail: str
    seconds: float
    skipped: bool = False


REGISTRY: Dict[str, Oracle] = {}


def oracle(name: str, slow: bool = False):
    def register(fn: OracleFn) -> OracleFn:
        if name in REGISTRY:
            raise ValueError(f"Duplicate oracle '{name}'")
        REGISTRY[name] = Oracle(name, fn, slow)
        return fn
    return register


def _close(a, b, tol: float) -> bool:
    return bool(np.all(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) <= tol))


def tiny_world() -> WorldConfig:
    return WorldConfig(canvas=8, channels=1, audio_dim=4, num_classes=4, map_size=4,
                       size_mix={"medium": 0.4, "large": 0.3, "huge": 0.3},
                       labeled_pool_size=40, labeled_ratio=0.5, unlabeled_size=20,
                       val_size=10, test_size=10, instrumented_size=20, universe_size=200)


def tiny_config(**dmt) -> ExperimentConfig:
    return build_config({"world": tiny_world().model_dump(), "dmt": {"embed_dim": 4, "batch_size": 2, **dmt}})


# ---------------------------------------------------------------------------
# tensor engine
# ---------------------------------------------------------------------------

@oracle("tensor.l2_normalize_hand")
def _l2_hand(fault: bool):
    out = l2_normalize(Parameter([3.0, 4.0], "x")).value
    return _close(out, [3 / 5, 4 / 5], 1e-15), f"got {out.tolist()}"


@oracle("tensor.mean_square_grad")
def _mean_square(fault: bool):
    x = Parameter([1.0, 2.0], "x")
    grads = backward(tmean(x * x))
    g = grads["x"] + (FAULT_PERTURBATION if fault else 0.0)
    return _close(g, [1.0, 2.0], 1e-12), f"grad {g.tolist()}"


@oracle("tensor.loss_terms_finite_difference")
def _loss_fd(fault: bool):
    rng = np.random.default_rng(0)
    perturb = FAULT_PERTURBATION if fault else 0.0
    pred = Parameter(rng.uniform(-1, 1, size=(4, 4)), "pred")
    target = (rng.random((4, 4)) < 0.5).astype(float)
    err_sup = gradient_check(lambda: supervised_map_loss(pred, target), [pred], perturb=perturb)
    g = Parameter(rng.normal(size=(3, 4)), "g")
    f = Parameter(rng.normal(size=(3, 4, 4, 4)), "f")
    err_nce = gradient_check(lambda: info_nce(contrastive_scores(g, f), 0.5), [g, f], perturb=perturb)
    worst = max(err_sup, err_nce)
    return worst < GRAD_TOL, f"max rel. error {worst:.2e} (BCE {err_sup:.1e}, InfoNCE {err_nce:.1e})"


@oracle("tensor.adam_first_step")
def _adam_hand(fault: bool):
    p = Parameter([5.0], "p")
    adam_step([p], [np.array([1.0])], AdamState(lr=0.1))
    # Bias-corrected first step: lr * g / (|g| + eps)
    expected = 5.0 - 0.1 * 1.0 / (1.0 + 1e-8)
    return _close(p.value, [expected], 1e-12), f"param {p.value[0]!r}, expected {expected!r}"


# ---------------------------------------------------------------------------
# synthetic world
# ---------------------------------------------------------------------------

@oracle("world.band_frequencies")
def _band_freq(fault: bool):
    world = WorldConfig(size_mix={"small": 0.5, "large": 0.5}, min_objects=1, max_objects=1)
    counts = {"small": 0, "large": 0}
    n = 10000
    for k in range(n):
        scene = generate_scene(sample_rng(11, k), world, k)
        box = scene.sounding_object.box
        counts[band_of_area(box[2] * box[3], world.canvas)] += 1
    freq = counts["small"] / n
    return abs(freq - 0.5) <= 0.02, f"small {freq:.4f}, large {counts['large'] / n:.4f}"


@oracle("world.audio_class_correlation")
def _audio_corr(fault: bool):
    world = WorldConfig()
    pairs = [make_pair(3, k, world, "test", 0.0) for k in range(1000)]
    audio = np.stack([p.audio for p in pairs])
    audio /= np.linalg.norm(audio, axis=1, keepdims=True)
    classes = np.array([p.class_id for p in pairs])
    sims = audio @ audio.T
    same = classes[:, None] == classes[None, :]
    off_diag = ~np.eye(len(pairs), dtype=bool)
    gap = sims[same & off_diag].mean() - sims[~same].mean()
    return gap >= 0.3, f"same-class minus cross-class cosine {gap:.3f}"


@oracle("world.false_positive_count")
def _fp_count(fault: bool):
    world = WorldConfig()
    n, rate = 1000, 0.2
    count = sum(make_pair(5, k, world, "unlabeled", rate).is_false_positive for k in range(n))
    tol = 3 * math.sqrt(n * rate * (1 - rate))
    return abs(count - n * rate) <= tol, f"{count} false positives (expected {n * rate:.0f} +/- {tol:.0f})"


@oracle("world.flip_box_coordinates")
def _flip_box(fault: bool):
    world = WorldConfig()
    S = world.canvas
    gt = rasterize_box((0, 4, S // 4, 10), world)
    flipped = transform_map(gt, AugmentationSpec("weak", (AugOp("flip"),)))
    cols = np.nonzero(flipped.any(axis=0))[0]
    lo, hi = cols.min() * world.cell, (cols.max() + 1) * world.cell
    ok = lo == S - S // 4 and hi == S
    return ok, f"flipped box spans x in [{lo}, {hi})"


@oracle("world.learnability_floor", slow=True)
def _learnability(fault: bool):
    from lab.experiment import evaluate_bundle
    from dmt.synthworld import make_splits
    from dmt.trainer import warm_up

    config = build_config({"ablation": {"dual_teachers": False}})
    splits = make_splits(config.world, 0)
    bundle = build_bundle(config, 0)
    warm_up(bundle, splits.labeled, config, np.random.default_rng([0, 1]))
    score = evaluate_bundle(bundle, splits.test, config, "teacher_A").ciou
    return score >= 0.6, f"supervised-only test CIoU {score:.3f}"


# ---------------------------------------------------------------------------
# localization pipeline
# ---------------------------------------------------------------------------

@oracle("pipeline.predicted_map_dot_products")
def _pred_map(fault: bool):
    rng = np.random.default_rng(1)
    g = rng.normal(size=4)
    f = rng.normal(size=(3, 3, 4))
    out = predicted_map(g, f).value
    expected = np.zeros((3, 3))
    for y in range(3):
        for x in range(3):
            dot = sum(g[k] * f[y, x, k] for k in range(4))
            expected[y, x] = dot / (math.sqrt(sum(v * v for v in g)) * math.sqrt(sum(v * v for v in f[y, x])))
    return _close(out, expected, 1e-12), f"max diff {np.abs(out - expected).max():.1e}"


@oracle("pipeline.attention_peak_saturation")
def _attn_peak(fault: bool):
    rng = np.random.default_rng(2)
    f = rng.normal(size=(16, 16, 5))
    p = np.zeros((16, 16))
    p[4, 9] = 50.0
    out = attention_pool(f, p).value
    return _close(out, f[4, 9], 1e-6), f"max diff {np.abs(out - f[4, 9]).max():.1e}"


@oracle("pipeline.info_nce_two_term")
def _nce_closed(fault: bool):
    t = 0.07
    loss = float(info_nce(np.array([[1.0, -1.0], [-1.0, 1.0]]), t).value)
    expected = -2 * math.log(math.exp(1 / t) / (math.exp(1 / t) + math.exp(-1 / t))) / 2
    return abs(loss - expected) <= 1e-9 and abs(loss) <= 1e-9, f"loss {loss:.3e}, closed form {expected:.3e}"


@oracle("pipeline.bce_pixel_loop")
def _bce_loop(fault: bool):
    rng = np.random.default_rng(3)
    pred = rng.uniform(-1, 1, size=(4, 4))
    target = (rng.random((4, 4)) < 0.5).astype(float)
    loss = float(supervised_map_loss(pred, target, 0.25, 0.0).value)
    total = 0.0
    for y in range(4):
        for x in range(4):
            s = 1.0 / (1.0 + math.exp(-pred[y, x] / 0.25))
            total += -(target[y, x] * math.log(s) + (1 - target[y, x]) * math.log(1 - s))
    return abs(loss - total / 16) <= 1e-12, f"loss {loss!r}, loop {total / 16!r}"


# ---------------------------------------------------------------------------
# Dual Mean-Teacher engine
# ---------------------------------------------------------------------------

def _pilot(overrides: Optional[dict] = None, seed: int = 0):
    from lab.experiment import run_experiment
    import tempfile

    config = build_config(overrides or {})
    with tempfile.TemporaryDirectory() as tmp:
        return run_experiment(config, seed, out_dir=tmp)


@oracle("dmt.warmup_val_ciou", slow=True)
def _warm_ciou(fault: bool):
    from dmt.synthworld import make_splits
    from dmt.trainer import validation_scores, warm_up

    config = ExperimentConfig()
    splits = make_splits(config.world, 0)
    bundle = build_bundle(config, 0)
    warm_up(bundle, splits.labeled, config, np.random.default_rng([0, 1]))
    a = validation_scores(bundle, splits.val, config, "teacher_A")["ciou"]
    b = validation_scores(bundle, splits.val, config, "teacher_B")["ciou"]
    return min(a, b) >= 0.6, f"teacher validation CIoU A {a:.3f}, B {b:.3f}"


@oracle("dmt.warmup_loss_moving_average", slow=True)
def _warm_curve(fault: bool):
    from dmt.synthworld import make_splits
    from dmt.trainer import warm_up

    config = ExperimentConfig()
    splits = make_splits(config.world, 0)
    bundle = build_bundle(config, 0)
    losses = warm_up(bundle, splits.labeled, config, np.random.default_rng([0, 1])).losses
    window = min(4, len(losses))
    avg = np.convolve(losses, np.ones(window) / window, mode="valid")
    ok = bool(np.all(np.diff(avg) <= 1e-12))
    return ok, f"moving averages {np.round(avg, 4).tolist()}"


@oracle("dmt.binarize_pixel_loop")
def _binarize(fault: bool):
    rng = np.random.default_rng(4)
    for _ in range(100):
        p = rng.uniform(-1, 1, size=(6, 6))
        delta = float(rng.uniform(-0.9, 0.9))
        out = binarize(p, delta)
        for y in range(6):
            for x in range(6):
                if out[y, x] != (1.0 if p[y, x] >= delta else 0.0):
                    return False, f"mismatch at ({y}, {x})"
    return True, "100 random maps identical"


@oracle("dmt.map_iou_count")
def _iou_count(fault: bool):
    m1 = np.array([[1.0, 1.0], [0.0, 0.0]])
    m2 = np.array([[0.0, 1.0], [0.0, 1.0]])
    value = map_iou(m1, m2)
    return abs(value - 1 / 3) <= 1e-15, f"IoU {value!r}"


@oracle("dmt.false_positive_rejection", slow=True)
def _fp_reject(fault: bool):
    overrides = {"dmt": {"epochs": 0, "tau": 0.7}, "world": {"fp_rate": 0.2}}
    runs = [_pilot(overrides, seed).filter_after_warmup for seed in PILOT_SEEDS]
    mean = {key: float(np.mean([d[key] for d in runs]))
            for key in ("accept_rate_genuine", "accept_rate_fp", "ipl_iou_accepted", "ipl_iou_all")}
    gap = mean["accept_rate_genuine"] - mean["accept_rate_fp"]
    ok = gap >= FP_ACCEPT_GAP and mean["ipl_iou_accepted"] > mean["ipl_iou_all"]
    return ok, (f"acceptance genuine {mean['accept_rate_genuine']:.3f}, false positive {mean['accept_rate_fp']:.3f}; "
                f"IPL IoU accepted {mean['ipl_iou_accepted']:.3f}, unfiltered {mean['ipl_iou_all']:.3f}")


@oracle("dmt.ipl_pixel_and")
def _ipl_and(fault: bool):
    rng = np.random.default_rng(5)
    for _ in range(100):
        a = (rng.random((5, 5)) < 0.5).astype(float)
        b = (rng.random((5, 5)) < 0.5).astype(float)
        out = make_ipl(a, b)
        for y in range(5):
            for x in range(5):
                if out[y, x] != (1.0 if a[y, x] == 1.0 and b[y, x] == 1.0 else 0.0):
                    return False, f"mismatch at ({y}, {x})"
    return True, "100 random mask pairs identical"


@oracle("dmt.batch_histogram")
def _batch_hist(fault: bool):
    world = tiny_world()
    dummy = make_pair(0, 0, world, "labeled", 0.0)
    pool = ([MixedItem(dummy, dummy.gt, GROUND_TRUTH)] * 400 + [MixedItem(dummy, dummy.gt, PSEUDO)] * 700)
    rng = np.random.default_rng(6)
    batches: List[list] = []
    while len(batches) < 100:
        batches.extend(b for b in mixed_batches(pool, 32, rng) if len(b) == 32)
    batches = batches[:100]
    fractions = [sum(item.provenance == PSEUDO for item in b) / len(b) for b in batches]
    mixed = sum(0 < fr < 1 for fr in fractions)
    mean = float(np.mean(fractions))
    ok = abs(mean - 700 / 1100) <= 0.02 and mixed >= 95
    return ok, f"mean pseudo fraction {mean:.4f} (pool {700 / 1100:.4f}), {mixed}/100 batches mixed"


@oracle("dmt.full_loss_finite_difference")
def _full_fd(fault: bool):
    config = tiny_config(lambda_u=1.0, temperature=0.5)
    config.ablation.strong_augment = False
    world = config.world
    bundle = build_bundle(config, 0)
    pairs = [make_pair(1, k, world, "labeled", 0.0) for k in range(2)]
    mix = [MixedItem(p, p.gt, GROUND_TRUTH) for p in pairs]
    unl = [make_pair(1, 10 + k, world, "unlabeled", 0.0) for k in range(2)]
    students = [bundle.student_a, bundle.student_b]
    checked = [p for s in students for p in s.params if p.name.endswith(("conv1.b", "conv3.b", "fc1.w", "fc2.b"))]

    def loss_fn():
        total = None
        visual = np.stack([p.visual for p in pairs])
        audio = np.stack([p.audio for p in pairs])
        target = np.stack([p.gt for p in pairs])
        u_visual = np.stack([p.visual for p in unl])
        u_audio = np.stack([p.audio for p in unl])
        for s in students:
            term = supervised_map_loss(s.forward(visual, audio), target) \
                + contrastive_loss(s, u_visual, u_audio, config.dmt.temperature) * config.dmt.lambda_u
            total = term if total is None else total + term
        return total

    err = gradient_check(loss_fn, checked, perturb=FAULT_PERTURBATION if fault else 0.0)
    # The same loss drives student_step: one step must move the students
    before = [p.value.copy() for p in checked]
    student_step(bundle, mix, unl, config, np.random.default_rng(0))
    moved = any(not np.array_equal(b, p.value) for b, p in zip(before, checked))
    return err < GRAD_TOL and moved, f"max rel. error {err:.2e} over {sum(p.value.size for p in checked)} entries"


@oracle("dmt.ema_hand_arithmetic")
def _ema_hand(fault: bool):
    config = tiny_config()
    bundle = build_bundle(config, 0)
    for p in bundle.teacher_a.params:
        p.value = np.ones_like(p.value)
    for p in bundle.student_a.params:
        p.value = np.zeros_like(p.value)
    ema_params(bundle.teacher_a, bundle.student_a, 0.999)
    ok = all(_close(p.value, 0.999, 1e-15) for p in bundle.teacher_a.params)
    return ok, f"teacher value {bundle.teacher_a.params[0].value.flat[0]!r}"


@oracle("dmt.fused_elementwise_mean")
def _fused(fault: bool):
    rng = np.random.default_rng(7)
    a = rng.uniform(-1, 1, size=(3, 5, 5))
    b = rng.uniform(-1, 1, size=(3, 5, 5))
    out = fuse_maps(a, b)
    expected = np.empty_like(a)
    for idx in np.ndindex(a.shape):
        expected[idx] = (a[idx] + b[idx]) / 2
    return _close(out, expected, 1e-15), f"max diff {np.abs(out - expected).max():.1e}"


@oracle("dmt.filter_beats_no_filter", slow=True)
def _filter_gain(fault: bool):
    full = _pilot().metrics["ciou"]
    no_filter = _pilot({"dmt": {"tau": 0.0}}).metrics["ciou"]
    return full > no_filter, f"full {full:.4f}, tau=0 {no_filter:.4f}"


@oracle("dmt.pseudo_count_trend", slow=True)
def _count_trend(fault: bool):
    counts = [row["n_accepted"] for row in _pilot().trace]
    if len(counts) < 2:
        return False, "need at least two stage-2 epochs"
    slope = float(np.polyfit(np.arange(len(counts)), counts, 1)[0])
    return slope >= 0, f"accepted counts {counts}, slope {slope:.2f}"


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@oracle("metrics.sample_iou_count")
def _iou_4x4(fault: bool):
    gt = np.zeros((4, 4))
    gt[0:2, :] = 1  # 8 pixels
    pred = np.zeros((4, 4))
    pred[1:3, 0:2] = 1  # 4 pixels, 2 overlap
    value = sample_iou(pred, gt, 0.6)
    return abs(value - 0.2) <= 1e-15, f"IoU {value!r}"


@oracle("metrics.ciou_count")
def _ciou_count(fault: bool):
    value = ciou([0.6, 0.4, 0.5, 0.7], 0.5)
    return value == 0.75, f"CIoU {value!r}"


@oracle("metrics.auc_trapezoid")
def _auc_hand(fault: bool):
    value = auc([1.0, 0.0])
    return abs(value - 0.5) <= 1e-12, f"AUC {value!r}"


@oracle("metrics.mse_pixel_loop")
def _mse_loop(fault: bool):
    rng = np.random.default_rng(8)
    pred = rng.uniform(-1, 1, size=(4, 4))
    gt = (rng.random((4, 4)) < 0.5).astype(float)
    lo, hi = pred.min(), pred.max()
    total = 0.0
    for y in range(4):
        for x in range(4):
            total += ((pred[y, x] - lo) / (hi - lo) - gt[y, x]) ** 2
    value = map_mse(pred, gt)
    return abs(value - total / 16) <= 1e-12, f"MSE {value!r}, loop {total / 16!r}"


def brute_force_pr(ious: Sequence[float], fps: Sequence[bool], confs: Sequence[float],
                   iou_threshold: float = 0.5):
    """Exhaustive threshold sweep with per-sample counting"""
    thresholds = [k / 100 for k in range(101)]
    precision, recall, f1 = [], [], []
    for delta in thresholds:
        tp = fp = fn = 0
        for iou, is_fp, conf in zip(ious, fps, confs):
            if conf >= delta:
                if not is_fp and iou >= iou_threshold:
                    tp += 1
                else:
                    fp += 1
            elif not is_fp:
                fn += 1
        p = tp / (tp + fp) if tp + fp else float("nan")
        r = tp / (tp + fn) if tp + fn else 0.0
        precision.append(p)
        recall.append(r)
        f1.append(2 * p * r / (p + r) if not math.isnan(p) and p + r > 0 else 0.0)
    points = sorted((r, p) for r, p in zip(recall, precision) if not math.isnan(p))
    ap = 0.0
    if points:
        env = []
        for k in range(len(points)):
            env.append(max(p for _, p in points[k:]))
        prev_r, prev_p = 0.0, env[0]
        for (r, _), p in zip(points, env):
            ap += (r - prev_r) * (p + prev_p) / 2
            prev_r, prev_p = r, p
    return precision, recall, f1, max(f1), ap


def _hand_records(ious, fps, confs) -> List[EvalRecord]:
    return [EvalRecord(k, np.zeros((1, 1)), np.ones((1, 1)), fp, None, conf)
            for k, (fp, conf) in enumerate(zip(fps, confs))]


def _same(a: Sequence[float], b: Sequence[float]) -> bool:
    return all((math.isnan(x) and math.isnan(y)) or abs(x - y) <= 1e-12 for x, y in zip(a, b))


@oracle("metrics.max_f1_hand_case")
def _f1_hand(fault: bool):
    ious, fps, confs = [0.8, 0.3, 0.0, 0.0], [False, False, True, True], [0.9, 0.8, 0.7, 0.1]
    max_f1, ap, curve, _ = max_f1_ap(_hand_records(ious, fps, confs), ious=np.array(ious))
    p, r, f1, bf_f1, bf_ap = brute_force_pr(ious, fps, confs)
    ok = _same(curve.precision, p) and _same(curve.recall, r) and _same(curve.f1, f1) \
        and abs(max_f1 - bf_f1) <= 1e-12 and abs(ap - bf_ap) <= 1e-12
    return ok, f"max-F1 {max_f1:.4f} (oracle {bf_f1:.4f}), AP {ap:.4f} (oracle {bf_ap:.4f})"


# ---------------------------------------------------------------------------
# harness pilots
# ---------------------------------------------------------------------------

@oracle("harness.stage2_gain", slow=True)
def _stage2_gain(fault: bool):
    row = _pilot_ablation({"variants": [{"name": "full", "overrides": {}}]}).loc["full"]
    final, warm = float(row["CIoU"]), float(row["warmup_CIoU"])
    return final - warm >= MIN_GAIN, f"mean final CIoU {final:.4f}, warm-up {warm:.4f} over {len(PILOT_SEEDS)} seeds"


def _pilot_ablation(matrix) -> "object":
    """Per-variant summary rows over PILOT_SEEDS, indexed by variant name"""
    from lab.experiment import run_ablation, summary_rows
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        table = run_ablation(ExperimentConfig(), matrix, seeds=PILOT_SEEDS, out_dir=tmp)
    return summary_rows(table).set_index("variant")


@oracle("harness.ablation_full_ranks_first", slow=True)
def _ablation_rank(fault: bool):
    ciou = _pilot_ablation("modules")["CIoU"].astype(float)
    full = ciou["full"]
    single = max(ciou["single-teacher"], ciou["single-teacher-no-ema"])
    ok = full >= ciou.max() and full >= single + MIN_GAIN
    return ok, f"full {full:.4f}, best {ciou.idxmax()} ({ciou.max():.4f}), single teacher {single:.4f}"


def nearly_non_decreasing(values: Sequence[float], slack: float) -> bool:
    """Non-decreasing apart from at most one drop of at most ``slack``"""
    drops = [a - b for a, b in zip(values, values[1:]) if b < a]
    return len(drops) <= 1 and all(d <= slack for d in drops)


@oracle("harness.labeled_ratio_trend", slow=True)
def _ratio_trend(fault: bool):
    values = _pilot_ablation("ratio")["CIoU"].astype(float).tolist()
    return nearly_non_decreasing(values, RATIO_SLACK), f"mean CIoU by ratio {np.round(values, 4).tolist()}"


@oracle("harness.warmup_necessity", slow=True)
def _warmup_needed(fault: bool):
    ciou = _pilot_ablation({"variants": [
        {"name": "default", "overrides": {}},
        {"name": "no-warmup", "overrides": {"ablation.use_warmup": False}},
    ]})["CIoU"].astype(float)
    return ciou["no-warmup"] < ciou["default"], f"default {ciou['default']:.4f}, no warm-up {ciou['no-warmup']:.4f}"


@oracle("harness.threshold_sensitivity", slow=True)
def _threshold_shape(fault: bool):
    extremes = [("dmt.delta", 0.3), ("dmt.delta", 0.9), ("dmt.tau", 0.0), ("dmt.tau", 0.95)]
    variants = [{"name": "default", "overrides": {"dmt.delta": 0.6, "dmt.tau": 0.7}}]
    variants += [{"name": f"{key.split('.')[-1]}={value}", "overrides": {key: value}} for key, value in extremes]
    ciou = _pilot_ablation({"variants": variants})["CIoU"].astype(float)
    ok = all(ciou["default"] >= ciou[v["name"]] for v in variants[1:])
    return ok, ", ".join(f"{name} {value:.4f}" for name, value in ciou.items())


# ---------------------------------------------------------------------------
# invariants (randomized)
# ---------------------------------------------------------------------------

@oracle("invariant.metric_random_equivalence")
def _metric_random(fault: bool):
    rng = np.random.default_rng(9)
    for _ in range(100):
        pred = rng.normal(size=(4, 4))
        gt = (rng.random((4, 4)) < 0.4).astype(float)
        gt[0, 0] = 1.0
        norm = (pred - pred.min()) / (pred.max() - pred.min())
        inter = union = 0
        for y in range(4):
            for x in range(4):
                fg = norm[y, x] >= 0.6
                inter += int(fg and gt[y, x] == 1)
                union += int(fg or gt[y, x] == 1)
        if sample_iou(pred, gt, 0.6) != inter / union:
            return False, "sample_iou differs from the pixel loop"
        if abs(map_mse(pred, gt) - float(np.mean((norm - gt) ** 2))) > 1e-12:
            return False, "map_mse differs from the pixel mean"
    return True, "100 random instances"


@oracle("invariant.ipl_containment")
def _containment(fault: bool):
    rng = np.random.default_rng(10)
    for _ in range(100):
        a = (rng.random((6, 6)) < 0.5).astype(float)
        b = (rng.random((6, 6)) < 0.5).astype(float)
        ipl = make_ipl(a, b)
        if np.any(ipl > a) or np.any(ipl > b):
            return False, "IPL escapes a teacher mask"
    return True, "100 random mask pairs"


@oracle("invariant.ema_convexity")
def _convexity(fault: bool):
    rng = np.random.default_rng(11)
    config = tiny_config()
    bundle = build_bundle(config, 0)
    for _ in range(100):
        for p in bundle.student_a.params:
            p.value = rng.normal(size=p.value.shape)
        before = [p.value.copy() for p in bundle.teacher_a.params]
        beta = float(rng.random())
        ema_params(bundle.teacher_a, bundle.student_a, beta)
        for old, t, s in zip(before, bundle.teacher_a.params, bundle.student_a.params):
            lo, hi = np.minimum(old, s.value), np.maximum(old, s.value)
            if np.any(t.value < lo - 1e-15) or np.any(t.value > hi + 1e-15):
                return False, f"{t.name} left the interval at beta={beta:.3f}"
    return True, "100 random steps"


@oracle("invariant.tau_monotone")
def _tau_monotone(fault: bool):
    rng = np.random.default_rng(12)
    masks_a = [(rng.random((5, 5)) < 0.5).astype(float) for _ in range(100)]
    masks_b = [(rng.random((5, 5)) < 0.5).astype(float) for _ in range(100)]
    prev = None
    for tau in np.linspace(0, 1, 21):
        accepted = sum(acc for _, acc in consensus(masks_a, masks_b, float(tau)))
        if prev is not None and accepted > prev:
            return False, f"acceptance grew at tau={tau:.2f}"
        prev = accepted
    return True, "acceptance non-increasing over 21 thresholds"


@oracle("invariant.ciou_monotone")
def _ciou_monotone(fault: bool):
    rng = np.random.default_rng(13)
    ious = rng.random(100)
    values = [ciou(ious, t) for t in np.linspace(0, 1, 101)]
    return all(b <= a for a, b in zip(values, values[1:])), "CIoU non-increasing in theta"


@oracle("invariant.geometry_consistency")
def _geometry(fault: bool):
    world = WorldConfig()
    rng = np.random.default_rng(14)
    for _ in range(100):
        scene = generate_scene(rng, world)
        gt = rasterize_box(scene.sounding_object.box, world)
        top, left = int(rng.integers(0, 4)), int(rng.integers(0, 4))
        spec = AugmentationSpec("strong", (AugOp("crop", (top, left, 13, 12)), AugOp("flip")))
        # Render gt onto the canvas block by block, transform, then read back one pixel per cell
        canvas = np.kron(gt, np.ones((world.cell, world.cell)))[..., None]
        moved = transform_visual(np.repeat(canvas, world.channels, axis=2), spec, world)[::world.cell, ::world.cell, 0]
        if not np.array_equal(moved, transform_map(gt, spec)):
            return False, "canvas and map lattice disagree"
    return True, "100 random crop+flip transforms"


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------

def missing_examples() -> List[str]:
    return [name for name in WORKED_EXAMPLES if name not in REGISTRY]


def coverage() -> Tuple[int, int]:
    """(registered worked-example oracles, required)"""
    return len(WORKED_EXAMPLES) - len(missing_examples()), len(WORKED_EXAMPLES)


def run_oracles(slow: bool = False, inject_fault: bool = False,
                names: Optional[Sequence[str]] = None) -> List[OracleResult]:
    """
    Run the registry and report per-oracle pass/fail

    Args:
        slow: also run the pilot-training oracles
        inject_fault: perturb analytic gradients (gradient oracles must fail)
        names: restrict to these oracle names

    Returns:
        list: one OracleResult per oracle plus the coverage check
    """
    results: List[OracleResult] = []
    for name, entry in REGISTRY.items():
        if names and name not in names:
            continue
        if entry.slow and not slow:
            results.append(OracleResult(name, True, "skipped (slow)", 0.0, skipped=True))
            continue
        start = time.perf_counter()
        try:
            passed, detail = entry.fn(inject_fault)
        except Exception as e:
            passed, detail = False, f"{type(e).__name__}: {e}"
        elapsed = time.perf_counter() - start
        results.append(OracleResult(name, bool(passed), detail, elapsed))
        log = logger.info if passed else logger.error
        log(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail} ({elapsed:.2f}s)")

    have, need = coverage()
    missing = missing_examples()
    detail = f"{have} worked-example oracles registered, {need} required"
    if missing:
        detail += f"; missing {', '.join(missing)}"
    results.append(OracleResult("coverage.derived_examples", have >= need, detail, 0.0))
    return results


def failed(results: Sequence[OracleResult]) -> List[OracleResult]:
    return [r for r in results if not r.passed]

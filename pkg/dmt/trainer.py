"""
Dual Mean-Teacher training.

Warm-up trains the two teachers on labeled data; the unbiased stage then
alternates teacher consensus filtering, mixed-batch student updates and EMA
teacher updates, one filter refresh per epoch and one EMA update per step.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from lab.app.config import ExperimentConfig
from .adam import AdamState, adam_step
from .augment import augment, sample_augmentation
from .metrics import auc, ciou, make_records, map_mse, record_ious
from .pipeline import LocalizationNet, contrastive_loss, stack_audio, stack_visual, supervised_map_loss
from .pseudo import FilterResult, MixedItem, build_mixed, map_iou, mixed_batches, noise_filter
from .synthworld import AudioVisualPair, Splits
from .tensor import NonFiniteError, Parameter, backward, zero_grad

logger = logging.getLogger(__name__)

MAP_SOURCES = ("teacher_A", "teacher_B", "student_A", "student_B", "fused")


class TrainingError(Exception):
    def __init__(self, message: str, stage: str = "", epoch: Optional[int] = None, step: Optional[int] = None):
        self.stage = stage
        self.epoch = epoch
        self.step = step
        where = ", ".join(f"{k}={v}" for k, v in (("stage", stage), ("epoch", epoch), ("step", step)) if v not in ("", None))
        super().__init__(f"{message} ({where})" if where else message)


@dataclass
class ModelBundle:
    teacher_a: LocalizationNet
    teacher_b: LocalizationNet
    student_a: LocalizationNet
    student_b: LocalizationNet
    adam_a: AdamState
    adam_b: AdamState
    dual: bool = True
    epoch: int = 0

    def pairs(self) -> List[Tuple[LocalizationNet, LocalizationNet, AdamState]]:
        """Active (teacher, student, optimizer) triples"""
        out = [(self.teacher_a, self.student_a, self.adam_a)]
        if self.dual:
            out.append((self.teacher_b, self.student_b, self.adam_b))
        return out

    def networks(self) -> Dict[str, LocalizationNet]:
        return {
            "teacher_A": self.teacher_a,
            "teacher_B": self.teacher_b,
            "student_A": self.student_a,
            "student_B": self.student_b,
        }

    def predict(self, pairs: Sequence[AudioVisualPair], source: str = "fused") -> np.ndarray:
        if source == "fused":
            return infer_fused(self, pairs)
        nets = self.networks()
        if source not in nets:
            raise TrainingError(f"Unknown map source '{source}'")
        return nets[source].predict(pairs)


def build_bundle(config: ExperimentConfig, seed: int) -> ModelBundle:
    """
    Randomly initialized teachers and student copies

    Pair B uses architecture B, or architecture A with its own init seed when
    the heterogeneous switch is off.
    """
    world, dmt = config.world, config.dmt
    tag_b = "B" if config.ablation.heterogeneous else "A"
    teacher_a = LocalizationNet("teacher_A", "A", world, dmt.embed_dim, seed=2 * seed)
    teacher_b = LocalizationNet("teacher_B", tag_b, world, dmt.embed_dim, seed=2 * seed + 1)
    student_a = LocalizationNet("student_A", "A", world, dmt.embed_dim, seed=2 * seed)
    student_b = LocalizationNet("student_B", tag_b, world, dmt.embed_dim, seed=2 * seed + 1)
    student_a.copy_from(teacher_a)
    student_b.copy_from(teacher_b)
    return ModelBundle(teacher_a, teacher_b, student_a, student_b,
                       AdamState(lr=dmt.lr), AdamState(lr=dmt.lr), dual=config.ablation.dual_teachers)


def infer_fused(bundle: ModelBundle, pairs: Sequence[AudioVisualPair]) -> np.ndarray:
    """Mean of the two teacher maps; teacher A alone for the single-teacher baseline"""
    maps_a = bundle.teacher_a.predict(pairs)
    if not bundle.dual:
        return maps_a
    return fuse_maps(maps_a, bundle.teacher_b.predict(pairs))


def fuse_maps(map_a: np.ndarray, map_b: np.ndarray) -> np.ndarray:
    if map_a.shape != map_b.shape:
        raise TrainingError(f"Cannot fuse maps of shapes {map_a.shape} and {map_b.shape}")
    return 0.5 * (map_a + map_b)


def ema_params(teacher: LocalizationNet, student: LocalizationNet, beta: float) -> None:
    """theta_t <- beta * theta_t + (1 - beta) * theta_s, parameter-wise"""
    if not 0.0 <= beta <= 1.0:
        raise TrainingError(f"EMA decay must lie in [0, 1], got {beta}")
    if len(teacher.params) != len(student.params):
        raise TrainingError(f"{teacher.name} and {student.name} differ in parameter count")
    for pt, ps in zip(teacher.params, student.params):
        if pt.value.shape != ps.value.shape:
            raise TrainingError(f"EMA shape mismatch {pt.name} {pt.value.shape} vs {ps.name} {ps.value.shape}")
        pt.value = beta * pt.value + (1.0 - beta) * ps.value


def ema_update(bundle: ModelBundle, beta: float) -> None:
    for teacher, student, _ in bundle.pairs():
        ema_params(teacher, student, beta)


def _optimize(params: Sequence[Parameter], loss, state: AdamState, stage: str, epoch: int, step: int) -> float:
    zero_grad(params)
    try:
        backward(loss)
    except NonFiniteError as e:
        raise TrainingError(f"Non-finite loss: {e}", stage, epoch, step) from None
    grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]
    adam_step(params, grads, state)
    zero_grad(params)
    return float(loss.value)


def _strong_views(items: Sequence[Tuple[AudioVisualPair, Optional[np.ndarray]]], config: ExperimentConfig,
                  rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, List[Optional[np.ndarray]]]:
    """Strongly augmented (visual, audio, targets); identity when strong augmentation is off"""
    world = config.world
    kind = "strong" if config.ablation.strong_augment else "identity"
    visuals, targets = [], []
    for pair, target in items:
        spec = sample_augmentation(kind, rng, world)
        view, mapped = augment(pair, spec, world, target)
        visuals.append(view.visual)
        targets.append(mapped)
    return np.stack(visuals), np.stack([p.audio for p, _ in items]), targets


@dataclass
class WarmupResult:
    losses: List[float]
    val_ciou: List[float]


def warm_up(bundle: ModelBundle, labeled: Sequence[AudioVisualPair], config: ExperimentConfig,
            rng: np.random.Generator, val: Optional[Sequence[AudioVisualPair]] = None,
            epochs: Optional[int] = None) -> WarmupResult:
    """
    Supervised training of the teachers on labeled data

    Students are reset to copies of their teachers and both optimizers start
    fresh for the unbiased stage.

    Args:
        bundle: models to train in place
        labeled: labeled pairs
        config: experiment configuration
        rng: batch order and augmentation draws
        val: validation pairs for the per-epoch CIoU trace
        epochs: overrides config.dmt.warmup_epochs

    Returns:
        WarmupResult: per-epoch mean loss and validation CIoU
    """
    if not labeled:
        raise TrainingError("Warm-up needs at least one labeled sample", "warmup")
    dmt = config.dmt
    n_epochs = dmt.warmup_epochs if epochs is None else epochs
    teachers = [bundle.teacher_a, bundle.teacher_b] if bundle.dual else [bundle.teacher_a]
    optimizers = [AdamState(lr=dmt.lr) for _ in teachers]
    result = WarmupResult([], [])

    for epoch in range(n_epochs):
        losses = []
        for step, batch in enumerate(mixed_batches(list(labeled), dmt.batch_size, rng)):
            visual, audio, targets = _strong_views([(p, p.gt) for p in batch], config, rng)
            target = np.stack(targets)
            for teacher, state in zip(teachers, optimizers):
                loss = supervised_map_loss(teacher.forward(visual, audio), target,
                                           dmt.logit_scale, dmt.logit_bias)
                losses.append(_optimize(teacher.params, loss, state, "warmup", epoch, step))
        result.losses.append(float(np.mean(losses)))
        if val:
            result.val_ciou.append(validation_scores(bundle, val, config)["ciou"])
        logger.info(f"Warm-up epoch {epoch + 1}/{n_epochs}: loss {result.losses[-1]:.4f}"
                    + (f", val CIoU {result.val_ciou[-1]:.3f}" if val else ""))

    bundle.student_a.copy_from(bundle.teacher_a)
    bundle.student_b.copy_from(bundle.teacher_b)
    bundle.adam_a = AdamState(lr=dmt.lr)
    bundle.adam_b = AdamState(lr=dmt.lr)
    return result


@dataclass
class StepLosses:
    loss_sup: float
    loss_unsup: float
    loss_full: float


def student_step(bundle: ModelBundle, mix_batch: Sequence[MixedItem], unlabeled_batch: Sequence[AudioVisualPair],
                 config: ExperimentConfig, rng: np.random.Generator, epoch: int = 0, step: int = 0) -> StepLosses:
    """
    One Adam step for each active student on L_sup + lambda_u * L_unsup

    Strong augmentation is drawn once per item and shared by both students;
    geometric ops move the targets with the visual grid. Teachers are untouched.
    """
    if not mix_batch:
        raise TrainingError("Empty mixed batch", "unbiased", epoch, step)
    dmt = config.dmt
    visual, audio, targets = _strong_views([(m.pair, m.target) for m in mix_batch], config, rng)
    target = np.stack(targets)
    use_unsup = dmt.lambda_u > 0 and len(unlabeled_batch) >= 2
    if use_unsup:
        u_visual, u_audio, _ = _strong_views([(p, None) for p in unlabeled_batch], config, rng)

    total = None
    sup_total, unsup_total = 0.0, 0.0
    params: List[Parameter] = []
    for _, student, _ in bundle.pairs():
        params.extend(student.params)
        loss = supervised_map_loss(student.forward(visual, audio), target, dmt.logit_scale, dmt.logit_bias)
        sup_total += float(loss.value)
        if use_unsup:
            unsup = contrastive_loss(student, u_visual, u_audio, dmt.temperature)
            unsup_total += float(unsup.value)
            loss = loss + unsup * dmt.lambda_u
        total = loss if total is None else total + loss

    zero_grad(params)
    try:
        backward(total)
    except NonFiniteError as e:
        raise TrainingError(f"Non-finite loss: {e}", "unbiased", epoch, step) from None
    for _, student, state in bundle.pairs():
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in student.params]
        adam_step(student.params, grads, state)
    zero_grad(params)
    return StepLosses(sup_total, unsup_total, float(total.value))


def validation_scores(bundle: ModelBundle, pairs: Sequence[AudioVisualPair], config: ExperimentConfig,
                      source: str = "fused") -> Dict[str, float]:
    """CIoU, AUC and MSE of one map source on genuine pairs"""
    genuine = [p for p in pairs if not p.is_false_positive]
    if not genuine:
        return {"ciou": float("nan"), "auc": float("nan"), "mse": float("nan")}
    records = make_records(genuine, bundle.predict(genuine, source))
    ious = record_ious(records, config.dmt.delta_eval)
    return {
        "ciou": ciou(ious, config.dmt.ciou_threshold),
        "auc": auc(ious),
        "mse": float(np.mean([map_mse(r.pred, r.gt) for r in records])),
    }


@dataclass(frozen=True)
class EpochTrace:
    epoch: int
    ciou_val: float
    auc_val: float
    mse_val: float
    n_accepted: int
    ipl_quality: float
    fp_accept_rate: float
    loss_sup: float
    loss_unsup: float

    def as_row(self) -> Dict[str, float]:
        return asdict(self)


TRACE_COLUMNS = tuple(EpochTrace.__dataclass_fields__)


def pseudo_label_quality(result: FilterResult, instrumented: Dict[int, np.ndarray],
                         accepted_only: bool = True) -> float:
    """
    Mean IoU between pseudo-labels and hidden ground truth

    Both branches score labels in the original frame. With ``accepted_only``
    False, every instrumented pair is scored by its inverted teacher-mask
    intersection, as if nothing were filtered.
    """
    scores = []
    for d in result.decisions:
        gt = instrumented.get(d.sample_id)
        if gt is None:
            continue
        if accepted_only:
            if d.pseudo_label is None:
                continue
            scores.append(map_iou(d.pseudo_label, gt))
        else:
            scores.append(map_iou(d.ipl_original, gt))
    return float(np.mean(scores)) if scores else float("nan")


def refresh_pseudo_labels(bundle: ModelBundle, unlabeled: Sequence[AudioVisualPair], config: ExperimentConfig,
                          rng: np.random.Generator) -> FilterResult:
    ablation = config.ablation
    return noise_filter(
        unlabeled,
        bundle.teacher_a,
        bundle.teacher_b if bundle.dual else None,
        config.dmt.delta,
        config.dmt.tau,
        config.world,
        rng,
        use_filter=ablation.use_filter,
        use_ipl=ablation.use_ipl,
    )


def run_unbiased_stage(bundle: ModelBundle, splits: Splits, config: ExperimentConfig, rng: np.random.Generator,
                       callbacks: Sequence[Callable[[EpochTrace], None]] = (),
                       epochs: Optional[int] = None) -> Tuple[ModelBundle, List[EpochTrace]]:
    """
    Stage-2 loop

    Per epoch: refresh the filter and IPLs with the current teachers, train the
    students over the shuffled mixed pool (each step paired with a uniformly
    drawn unlabeled batch), EMA-update the teachers after every step, then
    validate the fused teachers.

    Returns:
        tuple: (bundle, per-epoch traces)
    """
    dmt, ablation = config.dmt, config.ablation
    n_epochs = dmt.epochs if epochs is None else epochs
    beta = dmt.beta if ablation.use_ema else 0.0
    trace: List[EpochTrace] = []
    unlabeled = list(splits.unlabeled)

    for epoch in range(n_epochs):
        result = refresh_pseudo_labels(bundle, unlabeled, config, rng)
        if not result.accepted:
            logger.warning(f"Epoch {epoch + 1}: filter accepted no unlabeled pairs")
        mixed = build_mixed(splits.labeled, result.accepted)

        sup, unsup = [], []
        for step, batch in enumerate(mixed_batches(mixed, dmt.batch_size, rng)):
            u_batch = []
            if unlabeled:
                idx = rng.choice(len(unlabeled), size=min(dmt.batch_size, len(unlabeled)), replace=False)
                u_batch = [unlabeled[i] for i in idx]
            losses = student_step(bundle, batch, u_batch, config, rng, epoch, step)
            ema_update(bundle, beta)
            sup.append(losses.loss_sup)
            unsup.append(losses.loss_unsup)
            logger.debug(f"Epoch {epoch + 1} step {step}: sup {losses.loss_sup:.4f}, unsup {losses.loss_unsup:.4f}")

        scores = validation_scores(bundle, splits.val, config)
        row = EpochTrace(
            epoch=epoch + 1,
            ciou_val=scores["ciou"],
            auc_val=scores["auc"],
            mse_val=scores["mse"],
            n_accepted=result.n_accepted,
            ipl_quality=pseudo_label_quality(result, splits.instrumented),
            fp_accept_rate=result.acceptance_rate(false_positive=True),
            loss_sup=float(np.mean(sup)) if sup else float("nan"),
            loss_unsup=float(np.mean(unsup)) if unsup else float("nan"),
        )
        trace.append(row)
        bundle.epoch += 1
        logger.info(f"Epoch {row.epoch}/{n_epochs}: val CIoU {row.ciou_val:.3f}, accepted {row.n_accepted}, "
                    f"IPL quality {row.ipl_quality:.3f}, FP accept rate {row.fp_accept_rate:.3f}")
        for callback in callbacks:
            callback(row)

    return bundle, trace

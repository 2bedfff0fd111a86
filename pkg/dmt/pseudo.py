"""
Pseudo-label generation: binarization, consensus filtering, IPL and the mixed pool
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from lab.app.config import WorldConfig
from .augment import AugmentationSpec, augment, invert_map, sample_augmentation
from .pipeline import LocalizationNet
from .synthworld import AudioVisualPair

logger = logging.getLogger(__name__)

GROUND_TRUTH = "ground-truth"
PSEUDO = "pseudo"


class PseudoLabelError(Exception):
    pass


def binarize(p: np.ndarray, delta: float) -> np.ndarray:
    """M = 1(P >= delta)"""
    if not -1.0 < delta < 1.0:
        raise PseudoLabelError(f"delta must lie in (-1, 1), got {delta}")
    return (np.asarray(p) >= delta).astype(np.float64)


def map_iou(m1: np.ndarray, m2: np.ndarray) -> float:
    """IoU of two binary maps; 1 when both are empty"""
    if m1.shape != m2.shape:
        raise PseudoLabelError(f"map_iou: shape mismatch {m1.shape} vs {m2.shape}")
    a, b = m1 > 0.5, m2 > 0.5
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def make_ipl(mask_a: np.ndarray, mask_b: np.ndarray) -> np.ndarray:
    """Intersection of the two teachers' masks"""
    if mask_a.shape != mask_b.shape:
        raise PseudoLabelError(f"make_ipl: shape mismatch {mask_a.shape} vs {mask_b.shape}")
    return mask_a * mask_b


@dataclass
class FilterDecision:
    sample_id: int
    iou: float
    passes_consensus: bool
    accepted: bool  # entered the pseudo-label pool
    mask_a: np.ndarray  # weak-view frame
    mask_b: Optional[np.ndarray]
    ipl_original: np.ndarray  # original frame, kept for every pair
    pseudo_label: Optional[np.ndarray]  # original frame; None unless accepted
    is_false_positive: bool


@dataclass
class FilterResult:
    decisions: List[FilterDecision] = field(default_factory=list)
    accepted: List[Tuple[AudioVisualPair, np.ndarray]] = field(default_factory=list)

    @property
    def n_accepted(self) -> int:
        return len(self.accepted)

    def acceptance_rate(self, false_positive: bool) -> float:
        group = [d for d in self.decisions if d.is_false_positive == false_positive]
        if not group:
            return float("nan")
        return sum(d.accepted for d in group) / len(group)


def consensus(masks_a: Sequence[np.ndarray], masks_b: Sequence[np.ndarray], tau: float) -> List[Tuple[float, bool]]:
    """(iou, passes) per mask pair; passes iff iou >= tau"""
    out = []
    for ma, mb in zip(masks_a, masks_b):
        iou = map_iou(ma, mb)
        out.append((iou, iou >= tau))
    return out


def noise_filter(pairs: Sequence[AudioVisualPair], teacher_a: LocalizationNet,
                 teacher_b: Optional[LocalizationNet], delta: float, tau: float,
                 world: WorldConfig, rng: np.random.Generator, use_filter: bool = True,
                 use_ipl: bool = True, weak_augment: bool = True) -> FilterResult:
    """
    Teacher consensus over unlabeled pairs

    Both teachers see the same weak view of each pair. A pair passes consensus when
    the IoU of their binarized maps reaches ``tau``; its pseudo-label (the IPL,
    or teacher A's mask when IPL is off) is mapped back to the original frame.
    A pair that passes consensus with an empty pseudo-label is not accepted:
    ``accepted`` means the pair entered the pool.

    Args:
        pairs: unlabeled pairs
        teacher_a: first teacher
        teacher_b: second teacher, None for the single-teacher baseline
        delta: binarization threshold
        tau: IoU acceptance threshold
        world: world configuration
        rng: draws the weak views
        use_filter: when False every pair passes consensus
        use_ipl: when False teacher A's mask is the pseudo-label
        weak_augment: when False teachers see the raw pairs

    Returns:
        FilterResult: per-pair decisions and the accepted (pair, label) list
    """
    result = FilterResult()
    if not pairs:
        return result
    specs: List[AugmentationSpec] = [
        sample_augmentation("weak" if weak_augment else "identity", rng, world) for _ in pairs
    ]
    views = [augment(pair, spec, world)[0] for pair, spec in zip(pairs, specs)]
    masks_a = binarize(teacher_a.predict(views), delta)
    masks_b = binarize(teacher_b.predict(views), delta) if teacher_b is not None else None

    for k, (pair, spec) in enumerate(zip(pairs, specs)):
        ma = masks_a[k]
        mb = masks_b[k] if masks_b is not None else None
        if mb is None:
            iou, passes = 1.0, True
        else:
            iou = map_iou(ma, mb)
            passes = iou >= tau or not use_filter
        ipl_original = invert_map(make_ipl(ma, mb) if mb is not None else ma, spec)
        candidate = ipl_original if (use_ipl or mb is None) else invert_map(ma, spec)
        label = candidate if (passes and candidate.any()) else None
        if label is not None:
            result.accepted.append((pair, label))
        result.decisions.append(FilterDecision(pair.sample_id, iou, passes, label is not None, ma, mb,
                                               ipl_original, label, pair.is_false_positive))

    logger.debug(f"Filter accepted {result.n_accepted}/{len(pairs)} pairs")
    return result


@dataclass(frozen=True)
class MixedItem:
    pair: AudioVisualPair
    target: np.ndarray
    provenance: str  # ground-truth | pseudo


def build_mixed(labeled: Sequence[AudioVisualPair],
                accepted: Sequence[Tuple[AudioVisualPair, np.ndarray]]) -> List[MixedItem]:
    """Union of labeled pairs (target = gt) and accepted pairs (target = pseudo-label)"""
    mixed = []
    for pair in labeled:
        if pair.gt is None:
            raise PseudoLabelError(f"Labeled sample {pair.sample_id} has no ground truth")
        mixed.append(MixedItem(pair, pair.gt, GROUND_TRUTH))
    for pair, label in accepted:
        if pair.gt is not None:
            raise PseudoLabelError(f"Sample {pair.sample_id} carries both ground truth and a pseudo-label")
        if label is None:
            raise PseudoLabelError(f"Sample {pair.sample_id} has no pseudo-label")
        mixed.append(MixedItem(pair, label, PSEUDO))
    return mixed


def mixed_batches(mixed: Sequence, batch_size: int, rng: np.random.Generator) -> List[list]:
    """Shuffle the pool uniformly and cut it into batches"""
    order = rng.permutation(len(mixed))
    return [[mixed[i] for i in order[start:start + batch_size]]
            for start in range(0, len(order), batch_size)]

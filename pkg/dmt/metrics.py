"""
Localization metrics: IoU, CIoU, AUC, MSE and the precision/recall family.

Predicted maps are raw cosine maps. IoU and MSE min-max normalize each map to
[0, 1] first; detection confidence for the precision/recall sweep is the
largest raw cosine mapped to [0, 1].
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from lab.app.config import SIZE_BANDS
from .synthworld import AudioVisualPair

logger = logging.getLogger(__name__)

AUC_THRESHOLDS = np.round(np.arange(0.05, 0.951, 0.05), 2)
DETECTION_GRID = np.round(np.arange(0.0, 1.001, 0.01), 2)
AUC_NOTE = "AUC = trapezoidal area under CIoU(theta) for theta in 0.05..0.95, normalized to [0, 1]"
FP_ACC_NOTE = "fp_accuracy measured at the F1-maximizing detection threshold"


class MetricError(Exception):
    pass


@dataclass
class EvalRecord:
    sample_id: int
    pred: np.ndarray  # raw cosine map
    gt: np.ndarray
    is_false_positive: bool = False
    size_band: Optional[str] = None
    confidence: Optional[float] = None

    def __post_init__(self):
        if self.pred.shape != self.gt.shape:
            raise MetricError(f"Record {self.sample_id}: pred {self.pred.shape} vs gt {self.gt.shape}")
        if self.confidence is None:
            self.confidence = detection_confidence(self.pred)


@dataclass
class PRCurve:
    thresholds: List[float]
    precision: List[float]  # nan where nothing is detected
    recall: List[float]
    f1: List[float]


@dataclass
class MetricReport:
    ciou: float
    auc: float
    mse: float
    max_f1: float
    ap: float
    fp_accuracy: float
    n_records: int
    curve: Optional[PRCurve] = None
    bands: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, float]:
        """Flat key -> value view with fixed key names"""
        out = {
            "ciou": self.ciou,
            "auc": self.auc,
            "mse": self.mse,
            "max_f1": self.max_f1,
            "ap": self.ap,
            "fp_accuracy": self.fp_accuracy,
            "n_records": self.n_records,
        }
        for band in SIZE_BANDS:
            stats = self.bands.get(band, {})
            for key in ("count", "ciou", "auc", "mse"):
                out[f"band.{band}.{key}"] = stats.get(key, float("nan"))
        return out

    def to_text(self) -> str:
        lines = [f"{key}: {value!r}" for key, value in self.as_dict().items()]
        lines.append(f"# {AUC_NOTE}")
        lines.append(f"# {FP_ACC_NOTE}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        values: Dict[str, float] = {}
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            key, raw = line.split(":", 1)
            values[key.strip()] = float(raw.strip())
        bands = {}
        for band in SIZE_BANDS:
            stats = {key: values[f"band.{band}.{key}"] for key in ("count", "ciou", "auc", "mse")
                     if f"band.{band}.{key}" in values}
            if stats and not np.isnan(stats.get("count", np.nan)):
                bands[band] = stats
        return cls(values["ciou"], values["auc"], values["mse"], values["max_f1"], values["ap"],
                   values["fp_accuracy"], int(values["n_records"]), bands=bands)


def normalize_map(pred: np.ndarray) -> np.ndarray:
    """Per-sample min-max normalization; a constant map becomes all 0.5"""
    lo, hi = float(pred.min()), float(pred.max())
    if hi - lo <= 0:
        return np.full_like(pred, 0.5, dtype=np.float64)
    return (pred - lo) / (hi - lo)


def detection_confidence(pred: np.ndarray) -> float:
    """Largest raw cosine mapped from [-1, 1] to [0, 1]"""
    return float(np.clip((pred.max() + 1.0) / 2.0, 0.0, 1.0))


def sample_iou(pred: np.ndarray, gt: np.ndarray, delta_eval: float = 0.6,
               is_false_positive: bool = False) -> float:
    """IoU between the normalized map's foreground {pred >= delta_eval} and gt"""
    if pred.shape != gt.shape:
        raise MetricError(f"sample_iou: pred {pred.shape} vs gt {gt.shape}")
    target = gt > 0.5
    if not target.any() and not is_false_positive:
        raise MetricError("sample_iou: empty ground truth on a genuine sample")
    fg = normalize_map(pred) >= delta_eval
    union = int(np.count_nonzero(fg | target))
    if union == 0:
        return 1.0
    return np.count_nonzero(fg & target) / union


def ciou(ious: Sequence[float], threshold: float = 0.5) -> float:
    """Fraction of samples with IoU >= threshold"""
    if len(ious) == 0:
        raise MetricError("ciou: empty record set")
    if not 0.0 <= threshold <= 1.0:
        raise MetricError(f"ciou: threshold {threshold} outside [0, 1]")
    return float(np.mean(np.asarray(ious) >= threshold))


def auc(ious: Sequence[float]) -> float:
    """Area under CIoU(theta), theta in 0.05..0.95, normalized by the theta span"""
    if len(ious) == 0:
        raise MetricError("auc: empty record set")
    curve = np.array([ciou(ious, t) for t in AUC_THRESHOLDS])
    area = float(np.sum((curve[1:] + curve[:-1]) / 2.0 * np.diff(AUC_THRESHOLDS)))
    return area / float(AUC_THRESHOLDS[-1] - AUC_THRESHOLDS[0])


def map_mse(pred: np.ndarray, gt: np.ndarray) -> float:
    """Pixel-mean squared error between the normalized map and gt"""
    if pred.shape != gt.shape:
        raise MetricError(f"map_mse: pred {pred.shape} vs gt {gt.shape}")
    return float(np.mean((normalize_map(pred) - gt) ** 2))


def make_records(pairs: Sequence[AudioVisualPair], maps: np.ndarray) -> List[EvalRecord]:
    if len(pairs) != len(maps):
        raise MetricError(f"{len(pairs)} pairs but {len(maps)} maps")
    records = []
    for pair, pred in zip(pairs, maps):
        if pair.gt is None:
            raise MetricError(f"Sample {pair.sample_id} has no ground truth")
        records.append(EvalRecord(pair.sample_id, pred, pair.gt, pair.is_false_positive, pair.size_band))
    return records


def record_ious(records: Sequence[EvalRecord], delta_eval: float = 0.6) -> np.ndarray:
    return np.array([sample_iou(r.pred, r.gt, delta_eval, r.is_false_positive) for r in records])


def max_f1_ap(records: Sequence[EvalRecord], delta_eval: float = 0.6, iou_threshold: float = 0.5,
              ious: Optional[np.ndarray] = None):
    """
    Sweep the detection threshold over 0.00..1.00

    A sample is TP when detected, genuine and well localized; FP when detected
    and either a false positive or poorly localized; FN when genuine and not
    detected. AP is the trapezoidal area under the monotone precision envelope
    over recall, anchored at recall 0; thresholds that detect nothing have no
    precision and are left out.

    Returns:
        tuple: (max_f1, ap, PRCurve, fp_accuracy)
    """
    if len(records) == 0:
        raise MetricError("max_f1_ap: empty record set")
    if ious is None:
        ious = record_ious(records, delta_eval)
    conf = np.array([r.confidence for r in records])
    fp = np.array([r.is_false_positive for r in records])
    good = (~fp) & (ious >= iou_threshold)

    precision, recall, f1 = [], [], []
    for delta in DETECTION_GRID:
        detected = conf >= delta
        tp = int(np.count_nonzero(detected & good))
        fp_count = int(np.count_nonzero(detected & ~good))
        fn = int(np.count_nonzero(~detected & ~fp))
        p = tp / (tp + fp_count) if tp + fp_count > 0 else float("nan")
        r = tp / (tp + fn) if tp + fn > 0 else 0.0
        precision.append(p)
        recall.append(r)
        f1.append(0.0 if np.isnan(p) or p + r == 0 else 2 * p * r / (p + r))

    best = int(np.argmax(f1))
    detected = conf >= DETECTION_GRID[best]
    correct = (detected & good) | (~detected & fp)
    fp_accuracy = float(np.mean(correct))

    points = sorted((r, p) for r, p in zip(recall, precision) if not np.isnan(p))
    if not points:
        ap = 0.0
    else:
        rs = np.array([pt[0] for pt in points])
        ps = np.array([pt[1] for pt in points])
        envelope = np.maximum.accumulate(ps[::-1])[::-1]
        rs = np.concatenate([[0.0], rs])
        envelope = np.concatenate([[envelope[0]], envelope])
        ap = float(np.sum((envelope[1:] + envelope[:-1]) / 2.0 * np.diff(rs)))

    curve = PRCurve([float(d) for d in DETECTION_GRID], precision, recall, f1)
    return float(max(f1)), ap, curve, fp_accuracy


def evaluate_records(records: Sequence[EvalRecord], delta_eval: float = 0.6,
                     threshold: float = 0.5) -> MetricReport:
    """
    Full metric report

    CIoU, AUC, MSE and the size bands use genuine samples only; the
    precision/recall family uses every record.
    """
    if len(records) == 0:
        raise MetricError("evaluate_records: empty record set")
    ious = record_ious(records, delta_eval)
    genuine = [k for k, r in enumerate(records) if not r.is_false_positive]
    g_ious = ious[genuine]
    if len(genuine):
        c, a = ciou(g_ious, threshold), auc(g_ious)
        mse = float(np.mean([map_mse(records[k].pred, records[k].gt) for k in genuine]))
    else:
        c = a = mse = float("nan")
    max_f1, ap, curve, fp_acc = max_f1_ap(records, delta_eval, threshold, ious)

    bands: Dict[str, Dict[str, float]] = {}
    for band in SIZE_BANDS:
        idx = [k for k in genuine if records[k].size_band == band]
        if not idx:
            continue
        bands[band] = {
            "count": float(len(idx)),
            "ciou": ciou(ious[idx], threshold),
            "auc": auc(ious[idx]),
            "mse": float(np.mean([map_mse(records[k].pred, records[k].gt) for k in idx])),
        }
    return MetricReport(c, a, mse, max_f1, ap, fp_acc, len(records), curve, bands)

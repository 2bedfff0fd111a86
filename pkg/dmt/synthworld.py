"""
Synthetic audio-visual world.

Every sample is a pure function of (seed, sample id): scenes hold a few
class-keyed textured objects on a noisy background, the paired audio is the
sounding class's embedding plus isotropic noise, and ground truth marks the
sounding object's box on the map lattice.
"""
import colorsys
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np

from lab.app.config import SIZE_BANDS, WorldConfig

logger = logging.getLogger(__name__)

SPLITS = ("labeled", "unlabeled", "val", "test")

# Band upper edges as fractions of the canvas side, from the 224-pixel convention
_BAND_EDGES = (32 / 224, 96 / 224, 144 / 224)
_MAX_BOX_TRIES = 200


class WorldConfigError(Exception):
    """World configuration cannot produce the requested samples"""


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    box: Tuple[int, int, int, int]  # x, y, w, h in canvas pixels
    appearance_seed: int
    sounding: bool = False


@dataclass(frozen=True)
class Scene:
    sample_id: int
    objects: Tuple[SceneObject, ...]
    background_seed: int
    audio_class: int
    is_false_positive: bool = False

    @property
    def sounding_object(self) -> Optional[SceneObject]:
        for obj in self.objects:
            if obj.sounding:
                return obj
        return None


@dataclass
class AudioVisualPair:
    sample_id: int
    split: str
    visual: np.ndarray  # (S, S, ch) in [0, 1]
    audio: np.ndarray  # (D,)
    gt: Optional[np.ndarray]  # (H, W) in {0, 1}
    is_false_positive: bool
    class_id: int  # class of the audio
    box: Optional[Tuple[int, int, int, int]] = None
    size_band: Optional[str] = None


@dataclass
class Splits:
    labeled: List[AudioVisualPair]
    unlabeled: List[AudioVisualPair]
    val: List[AudioVisualPair]
    test: List[AudioVisualPair]
    # Hidden ground truth for a subset of unlabeled ids, used only for diagnostics
    instrumented: Dict[int, np.ndarray] = field(default_factory=dict)

    def by_name(self, name: str) -> List[AudioVisualPair]:
        return getattr(self, name)


def band_of_area(area: float, canvas: int) -> str:
    """Size band of a box area on an S x S canvas"""
    for band, edge in zip(SIZE_BANDS, _BAND_EDGES):
        if area <= (edge * canvas) ** 2:
            return band
    return "huge"


def _band_area_range(band: str, canvas: int, min_side: int) -> Tuple[float, float]:
    edges = [0.0] + [(e * canvas) ** 2 for e in _BAND_EDGES] + [float(canvas * canvas)]
    idx = SIZE_BANDS.index(band)
    lo, hi = edges[idx], edges[idx + 1]
    return max(lo, float(min_side * min_side)), hi


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for one sample"""
    return np.random.default_rng([int(seed), int(index)])


def _sample_box(rng: np.random.Generator, world: WorldConfig, band: str) -> Tuple[int, int, int, int]:
    canvas = world.canvas
    min_side = max(1, world.cell)
    lo, hi = _band_area_range(band, canvas, min_side)
    if lo > hi:
        raise WorldConfigError(f"Band '{band}' cannot hold a box with side >= {min_side} on a {canvas}px canvas")
    for _ in range(_MAX_BOX_TRIES):
        area = rng.uniform(lo, hi)
        aspect = float(np.exp(rng.uniform(np.log(0.6), np.log(1 / 0.6))))
        w = int(np.clip(round(np.sqrt(area * aspect)), min_side, canvas))
        h = int(np.clip(round(area / w), min_side, canvas))
        if band_of_area(w * h, canvas) != band:
            continue
        x = int(rng.integers(0, canvas - w + 1))
        y = int(rng.integers(0, canvas - h + 1))
        return x, y, w, h
    raise WorldConfigError(f"Could not fit a '{band}' box on a {canvas}px canvas")


def _sample_band(rng: np.random.Generator, world: WorldConfig) -> str:
    bands = [b for b in SIZE_BANDS if world.size_mix.get(b, 0.0) > 0]
    weights = np.array([world.size_mix[b] for b in bands], dtype=np.float64)
    return bands[int(rng.choice(len(bands), p=weights / weights.sum()))]


def generate_scene(rng: np.random.Generator, world: WorldConfig, sample_id: int = 0,
                   false_positive: bool = False) -> Scene:
    """
    Sample one scene

    Args:
        rng: per-sample generator (see sample_rng)
        world: world configuration
        sample_id: id stored on the scene
        false_positive: build a scene whose audio source is not visible

    Returns:
        Scene: at most one sounding object
    """
    if world.max_objects < world.min_objects:
        raise WorldConfigError("max_objects must be >= min_objects")
    if world.max_objects > world.num_classes:
        raise WorldConfigError("max_objects cannot exceed num_classes (objects carry distinct classes)")
    if world.canvas % world.map_size != 0:
        raise WorldConfigError("canvas must be a multiple of map_size")

    n_objects = int(rng.integers(world.min_objects, world.max_objects + 1))
    classes = rng.permutation(world.num_classes)
    background_seed = int(rng.integers(2 ** 31))

    if false_positive:
        # Either audio of an absent class over distractors, or nothing rendered at all
        empty_frame = bool(rng.random() < 0.5)
        n_visible = 0 if empty_frame else min(n_objects, world.num_classes - 1)
        objects = tuple(
            SceneObject(int(classes[k]), _sample_box(rng, world, _sample_band(rng, world)),
                        int(rng.integers(2 ** 31)))
            for k in range(n_visible)
        )
        audio_class = int(classes[n_visible]) if not empty_frame else int(classes[0])
        return Scene(sample_id, objects, background_seed, audio_class, is_false_positive=True)

    objects = []
    for k in range(n_objects):
        objects.append(SceneObject(int(classes[k]), _sample_box(rng, world, _sample_band(rng, world)),
                                   int(rng.integers(2 ** 31)), sounding=(k == 0)))
    # Sounding object drawn last so it is never occluded
    objects = tuple(objects[1:] + objects[:1])
    return Scene(sample_id, objects, background_seed, int(classes[0]))


@lru_cache(maxsize=32)
def _class_embeddings(num_classes: int, audio_dim: int) -> np.ndarray:
    rng = np.random.default_rng(7919)
    emb = rng.normal(size=(num_classes, audio_dim))
    return emb / np.linalg.norm(emb, axis=1, keepdims=True)


def class_embeddings(world: WorldConfig) -> np.ndarray:
    """Unit-norm audio embedding per class, fixed for a given world shape"""
    return _class_embeddings(world.num_classes, world.audio_dim)


@lru_cache(maxsize=32)
def _class_palette(num_classes: int, channels: int) -> np.ndarray:
    if channels == 3:
        return np.array([colorsys.hsv_to_rgb(c / num_classes, 0.85, 0.95) for c in range(num_classes)])
    rng = np.random.default_rng(104729)
    return rng.uniform(0.2, 1.0, size=(num_classes, channels))


def _class_pattern(class_id: int, h: int, w: int) -> np.ndarray:
    """Class-keyed stripe texture in [-1, 1]"""
    angle = np.pi * (class_id % 4) / 4
    freq = 0.5 + 0.25 * (class_id // 4)
    yy, xx = np.mgrid[0:h, 0:w]
    return np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy))


def rasterize_box(box: Tuple[int, int, int, int], world: WorldConfig) -> np.ndarray:
    """Map-lattice mask: cell (r, c) is set iff its centre lies inside the box"""
    x, y, w, h = box
    cell = world.cell
    centres = np.arange(world.map_size) * cell + cell / 2.0
    cols = (centres >= x) & (centres < x + w)
    rows = (centres >= y) & (centres < y + h)
    return np.outer(rows, cols).astype(np.float64)


def render_pair(scene: Scene, rng: np.random.Generator, world: WorldConfig,
                split: str = "test") -> AudioVisualPair:
    """
    Render a scene into an audio-visual pair

    Args:
        scene: scene to draw
        rng: generator for pixel and audio noise
        world: world configuration
        split: split tag stored on the pair

    Returns:
        AudioVisualPair: visual quantized to multiples of 1/255, gt always
            rendered (callers strip it for unlabeled data)
    """
    S, ch = world.canvas, world.channels
    bg_rng = np.random.default_rng(scene.background_seed)
    gray = bg_rng.uniform(0.35, 0.65)
    visual = gray + 0.08 * bg_rng.normal(size=(S, S, 1)) + 0.03 * bg_rng.normal(size=(S, S, ch))

    palette = _class_palette(world.num_classes, ch)
    for obj in scene.objects:
        x, y, w, h = obj.box
        obj_rng = np.random.default_rng(obj.appearance_seed)
        texture = 0.85 + 0.15 * _class_pattern(obj.class_id, h, w)[..., None]
        patch = palette[obj.class_id] * texture + 0.04 * obj_rng.normal(size=(h, w, ch))
        visual[y:y + h, x:x + w, :] = patch
    visual = np.round(np.clip(visual, 0.0, 1.0) * 255.0) / 255.0

    emb = class_embeddings(world)[scene.audio_class]
    audio = emb + (world.audio_noise / np.sqrt(world.audio_dim)) * rng.normal(size=world.audio_dim)

    sounding = scene.sounding_object
    if sounding is not None:
        gt = rasterize_box(sounding.box, world)
        box = sounding.box
        band = band_of_area(box[2] * box[3], S)
    else:
        gt = np.zeros((world.map_size, world.map_size))
        box, band = None, None

    return AudioVisualPair(
        sample_id=scene.sample_id,
        split=split,
        visual=visual,
        audio=audio,
        gt=gt,
        is_false_positive=scene.is_false_positive,
        class_id=scene.audio_class,
        box=box,
        size_band=band,
    )


def make_pair(seed: int, sample_id: int, world: WorldConfig, split: str, fp_rate: float) -> AudioVisualPair:
    """Generate one sample from (seed, id); false-positive flag drawn at ``fp_rate``"""
    rng = sample_rng(seed, sample_id)
    false_positive = bool(rng.random() < fp_rate)
    scene = generate_scene(rng, world, sample_id, false_positive)
    return render_pair(scene, rng, world, split)


def make_splits(world: WorldConfig, seed: int) -> Splits:
    """
    Build the labeled, unlabeled, validation and test splits

    Ids are assigned in that order, so splits are disjoint by construction.

    Args:
        world: world configuration
        seed: dataset seed

    Returns:
        Splits: unlabeled pairs carry no gt; hidden gt kept for the
            instrumented subset
    """
    sizes = {
        "labeled": world.labeled_size,
        "unlabeled": world.unlabeled_size,
        "val": world.val_size,
        "test": world.test_size,
    }
    if sizes["labeled"] < 1:
        raise WorldConfigError(f"labeled_ratio {world.labeled_ratio} of {world.labeled_pool_size} leaves no labeled samples")
    total = sum(sizes.values())
    if total > world.universe_size:
        raise WorldConfigError(f"Requested {total} samples exceed universe_size {world.universe_size}")
    fp_rates = {
        "labeled": world.labeled_fp_rate,
        "unlabeled": world.fp_rate,
        "val": world.val_fp_rate,
        "test": world.test_fp_rate,
    }

    out: Dict[str, List[AudioVisualPair]] = {}
    instrumented: Dict[int, np.ndarray] = {}
    next_id = 0
    for name in SPLITS:
        pairs = []
        for k in range(sizes[name]):
            pair = make_pair(seed, next_id + k, world, name, fp_rates[name])
            if name == "unlabeled":
                if k < world.instrumented_size:
                    instrumented[pair.sample_id] = pair.gt
                pair = replace(pair, gt=None)
            pairs.append(pair)
        out[name] = pairs
        next_id += sizes[name]

    splits = Splits(out["labeled"], out["unlabeled"], out["val"], out["test"], instrumented)
    n_fp = sum(p.is_false_positive for p in splits.unlabeled)
    logger.info(f"World generated (seed {seed}): labeled={len(splits.labeled)}, unlabeled={len(splits.unlabeled)} "
                f"({n_fp} false positives), val={len(splits.val)}, test={len(splits.test)}")
    return splits

"""
Weak and strong augmentations.

Geometric ops (crop-and-resize, horizontal flip) are defined on the map lattice
as nearest-neighbour index maps, so a visual grid and its ground-truth map
always move together pixel-exactly. Crops are lifted to the canvas block by
block; the flip mirrors the canvas pixel by pixel, which sends cell j to
cell M-1-j exactly as on the lattice.
Photometric ops touch only the visual grid.
"""
import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from lab.app.config import WorldConfig
from .synthworld import AudioVisualPair

logger = logging.getLogger(__name__)

GEOMETRIC_OPS = ("crop", "flip")
PHOTOMETRIC_OPS = ("jitter", "noise", "cutout", "channel_scale")
STRONG_OPS = GEOMETRIC_OPS + PHOTOMETRIC_OPS

WEAK_MIN_AREA = 0.8
STRONG_MIN_AREA = 0.6


class AugmentationError(Exception):
    pass


@dataclass(frozen=True)
class AugOp:
    name: str
    params: Tuple[float, ...] = ()


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str  # weak | strong | identity
    ops: Tuple[AugOp, ...] = ()
    seed: int = 0

    @property
    def geometric(self) -> Tuple[AugOp, ...]:
        return tuple(op for op in self.ops if op.name in GEOMETRIC_OPS)


IDENTITY = AugmentationSpec("identity")


def _sample_crop(rng: np.random.Generator, size: int, min_area: float) -> AugOp:
    for _ in range(20):
        area = rng.uniform(min_area, 1.0)
        aspect = float(np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3))))
        h = int(np.clip(round(np.sqrt(area * aspect) * size), 1, size))
        w = int(np.clip(round(np.sqrt(area / aspect) * size), 1, size))
        if h * w >= min_area * size * size:
            top = int(rng.integers(0, size - h + 1))
            left = int(rng.integers(0, size - w + 1))
            return AugOp("crop", (top, left, h, w))
    return AugOp("crop", (0, 0, size, size))


def _sample_op(name: str, rng: np.random.Generator, world: WorldConfig, min_area: float) -> AugOp:
    if name == "crop":
        return _sample_crop(rng, world.map_size, min_area)
    if name == "flip":
        return AugOp("flip")
    if name == "jitter":
        return AugOp("jitter", (rng.uniform(-0.15, 0.15), rng.uniform(0.7, 1.3)))
    if name == "noise":
        return AugOp("noise", (rng.uniform(0.02, 0.08), float(rng.integers(2 ** 31))))
    if name == "cutout":
        side = int(rng.integers(2, max(3, world.map_size // 3) + 1)) * world.cell
        top = int(rng.integers(0, world.canvas - side + 1))
        left = int(rng.integers(0, world.canvas - side + 1))
        return AugOp("cutout", (top, left, side))
    if name == "channel_scale":
        return AugOp("channel_scale", tuple(rng.uniform(0.7, 1.3, size=world.channels)))
    raise AugmentationError(f"Unknown augmentation op '{name}'")


def sample_augmentation(kind: str, rng: np.random.Generator, world: WorldConfig) -> AugmentationSpec:
    """
    Draw a per-sample augmentation

    Weak: each of {crop >= 80% area, flip} with probability 1/2.
    Strong: two distinct ops from {crop >= 60% area, flip, jitter, noise,
    cutout, channel scaling}.
    """
    seed = int(rng.integers(2 ** 31))
    if kind == "weak":
        ops = tuple(_sample_op(name, rng, world, WEAK_MIN_AREA) for name in GEOMETRIC_OPS if rng.random() < 0.5)
    elif kind == "strong":
        picks = rng.choice(len(STRONG_OPS), size=2, replace=False)
        ops = tuple(_sample_op(STRONG_OPS[i], rng, world, STRONG_MIN_AREA) for i in sorted(picks))
    elif kind == "identity":
        ops = ()
    else:
        raise AugmentationError(f"Unknown augmentation kind '{kind}'")
    return AugmentationSpec(kind, ops, seed)


def _lattice_index(op: AugOp, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Source row and column indices on the map lattice for one geometric op"""
    idx = np.arange(size)
    if op.name == "flip":
        return idx, idx[::-1].copy()
    top, left, h, w = (int(v) for v in op.params)
    if h < 1 or w < 1 or top < 0 or left < 0 or top + h > size or left + w > size:
        raise AugmentationError(f"Degenerate crop window {op.params} on a {size}x{size} lattice")
    rows = top + (idx * h) // size
    cols = left + (idx * w) // size
    return rows, cols


def _lift(index: np.ndarray, cell: int) -> np.ndarray:
    """Lattice index map -> canvas index map, one block per cell"""
    canvas = np.arange(index.size * cell)
    return index[canvas // cell] * cell + canvas % cell


def transform_map(m: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    """Apply the geometric part of ``spec`` to an H x W map"""
    out = m
    for op in spec.geometric:
        rows, cols = _lattice_index(op, m.shape[0])
        out = out[np.ix_(rows, cols)]
    return out


def invert_map(m: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    """
    Map an augmented-frame map back to the original frame

    Cells the crop window never sampled come back as 0.
    """
    out = m
    for op in reversed(spec.geometric):
        rows, cols = _lattice_index(op, m.shape[0])
        restored = np.zeros_like(out)
        # Reverse order so the first output cell sampling a source wins
        for i in range(rows.size - 1, -1, -1):
            restored[rows[i], cols[::-1]] = out[i, ::-1]
        out = restored
    return out


def transform_visual(visual: np.ndarray, spec: AugmentationSpec, world: WorldConfig) -> np.ndarray:
    out = visual
    for op in spec.ops:
        if op.name == "flip":
            out = out[:, ::-1, :]
        elif op.name == "crop":
            rows, cols = _lattice_index(op, world.map_size)
            out = out[np.ix_(_lift(rows, world.cell), _lift(cols, world.cell))]
        elif op.name == "jitter":
            brightness, contrast = op.params
            mean = out.mean()
            out = np.clip((out - mean) * contrast + mean + brightness, 0.0, 1.0)
        elif op.name == "noise":
            sigma, seed = op.params
            noise_rng = np.random.default_rng(int(seed))
            out = np.clip(out + sigma * noise_rng.normal(size=out.shape), 0.0, 1.0)
        elif op.name == "cutout":
            top, left, side = (int(v) for v in op.params)
            out = out.copy()
            out[top:top + side, left:left + side, :] = 0.5
        elif op.name == "channel_scale":
            out = np.clip(out * np.asarray(op.params), 0.0, 1.0)
        else:
            raise AugmentationError(f"Unknown augmentation op '{op.name}'")
    if out.shape != visual.shape:
        raise AugmentationError(f"Augmentation changed visual shape {visual.shape} -> {out.shape}")
    return out


def augment(pair: AudioVisualPair, spec: AugmentationSpec, world: WorldConfig,
            target: Optional[np.ndarray] = None) -> Tuple[AudioVisualPair, Optional[np.ndarray]]:
    """
    Augment a pair and its target map together

    Args:
        pair: pair to augment
        spec: sampled augmentation
        world: world configuration
        target: map to transform; defaults to the pair's gt

    Returns:
        tuple: (augmented pair, transformed target or None)
    """
    if not spec.ops:
        return pair, (target if target is not None else pair.gt)
    visual = transform_visual(pair.visual, spec, world)
    gt = transform_map(pair.gt, spec) if pair.gt is not None else None
    mapped = transform_map(target, spec) if target is not None else gt
    return replace(pair, visual=visual, gt=gt), mapped

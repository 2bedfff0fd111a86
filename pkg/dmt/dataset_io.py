"""
Dataset export and import.

One directory per split. Visual grids are binary pixmaps (P6, or P5 for
single-channel worlds), ground-truth maps binary graymaps (P5), maxval 255,
row-major. ``manifest.jsonl`` holds one record per sample; audio values are
written with ``repr`` precision so the round trip is bit-exact.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from lab.app.config import WorldConfig
from .synthworld import SPLITS, AudioVisualPair, Splits

logger = logging.getLogger(__name__)

MANIFEST = "manifest.jsonl"
HIDDEN_DIR = "instrumented"


class DatasetIOError(Exception):
    pass


def write_pnm(path: Path, grid: np.ndarray) -> None:
    """Write a [0, 1] grid (H, W) or (H, W, 3) as P5/P6 with maxval 255"""
    if grid.ndim == 2:
        magic, data = b"P5", grid
    elif grid.ndim == 3 and grid.shape[2] == 3:
        magic, data = b"P6", grid
    elif grid.ndim == 3 and grid.shape[2] == 1:
        magic, data = b"P5", grid[..., 0]
    else:
        raise DatasetIOError(f"Cannot store a grid of shape {grid.shape} as P5/P6")
    raw = np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = raw.shape[:2]
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + raw.tobytes())


def _header_tokens(blob: bytes) -> Tuple[List[bytes], int]:
    """First four whitespace-separated header tokens and the payload offset"""
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetIOError("Truncated PNM header")
        tokens.append(blob[start:pos])
    return tokens, pos + 1


def read_pnm(path: Path) -> np.ndarray:
    """Read a P5/P6 file back into a float64 grid of multiples of 1/255"""
    blob = Path(path).read_bytes()
    tokens, offset = _header_tokens(blob)
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise DatasetIOError(f"{path}: unsupported maxval {maxval}")
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise DatasetIOError(f"{path}: unsupported magic {magic!r}")
    payload = np.frombuffer(blob, dtype=np.uint8, count=w * h * channels, offset=offset)
    grid = payload.astype(np.float64) / 255.0
    return grid.reshape(h, w) if channels == 1 else grid.reshape(h, w, 3)


def _stem(sample_id: int) -> str:
    return f"{sample_id:06d}"


def export_splits(splits: Splits, out_dir: str, config_hash: Optional[str] = None) -> Dict[str, int]:
    """
    Write every split to disk

    Args:
        splits: generated splits
        out_dir: destination directory
        config_hash: embedded in each manifest record when given

    Returns:
        dict: split name -> samples written
    """
    root = Path(out_dir)
    counts: Dict[str, int] = {}
    for name in SPLITS:
        split_dir = root / name
        split_dir.mkdir(parents=True, exist_ok=True)
        lines = []
        for pair in splits.by_name(name):
            stem = _stem(pair.sample_id)
            write_pnm(split_dir / f"{stem}.ppm", pair.visual)
            if pair.gt is not None:
                write_pnm(split_dir / f"{stem}.pgm", pair.gt)
            record = {
                "id": pair.sample_id,
                "split": name,
                "class": pair.class_id,
                "box": list(pair.box) if pair.box is not None else None,
                "size_band": pair.size_band,
                "is_false_positive": pair.is_false_positive,
                "has_gt": pair.gt is not None,
                "audio": [repr(float(v)) for v in pair.audio],
            }
            if config_hash:
                record["config_hash"] = config_hash
            lines.append(json.dumps(record))
        (split_dir / MANIFEST).write_text("\n".join(lines) + ("\n" if lines else ""))
        counts[name] = len(lines)

    hidden = root / HIDDEN_DIR
    hidden.mkdir(parents=True, exist_ok=True)
    for sample_id, gt in splits.instrumented.items():
        write_pnm(hidden / f"{_stem(sample_id)}.pgm", gt)
    logger.info(f"Dataset exported to {root}: {counts}, {len(splits.instrumented)} instrumented maps")
    return counts


def import_splits(in_dir: str, world: WorldConfig) -> Splits:
    """Read a directory written by export_splits"""
    root = Path(in_dir)
    loaded: Dict[str, List[AudioVisualPair]] = {}
    for name in SPLITS:
        manifest = root / name / MANIFEST
        if not manifest.exists():
            raise DatasetIOError(f"Missing manifest {manifest}")
        pairs = []
        for line in manifest.read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            stem = _stem(rec["id"])
            visual = read_pnm(root / name / f"{stem}.ppm")
            if visual.ndim == 2:
                visual = visual[..., None]
            if visual.shape != (world.canvas, world.canvas, world.channels):
                raise DatasetIOError(f"{stem}: visual shape {visual.shape} does not match the world")
            gt = read_pnm(root / name / f"{stem}.pgm") if rec["has_gt"] else None
            pairs.append(AudioVisualPair(
                sample_id=rec["id"],
                split=rec["split"],
                visual=visual,
                audio=np.array([float(v) for v in rec["audio"]]),
                gt=gt,
                is_false_positive=rec["is_false_positive"],
                class_id=rec["class"],
                box=tuple(rec["box"]) if rec["box"] is not None else None,
                size_band=rec["size_band"],
            ))
        loaded[name] = pairs

    instrumented = {}
    hidden = root / HIDDEN_DIR
    if hidden.exists():
        for path in sorted(hidden.glob("*.pgm")):
            instrumented[int(path.stem)] = read_pnm(path)
    return Splits(loaded["labeled"], loaded["unlabeled"], loaded["val"], loaded["test"], instrumented)

"""
Named-tensor checkpoints.

Layout (little-endian):
    magic b"DMTCKPT1"
    u32 hash length, config hash (ascii)
    u64 epoch
    u32 tensor count
    per tensor: u32 name length, name (utf-8), u32 ndim, u64 per dim,
                float64 values in row-major order
"""
import logging
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from dmt.adam import AdamState
from dmt.trainer import ModelBundle, build_bundle
from lab.app.config import ExperimentConfig

logger = logging.getLogger(__name__)

MAGIC = b"DMTCKPT1"


class CheckpointError(Exception):
    pass


def write_tensors(path: str, tensors: Dict[str, np.ndarray], config_hash: str, epoch: int = 0) -> None:
    chunks = [MAGIC]
    hash_bytes = config_hash.encode("ascii")
    chunks.append(struct.pack("<I", len(hash_bytes)) + hash_bytes)
    chunks.append(struct.pack("<QI", epoch, len(tensors)))
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)) + name_bytes)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path: str) -> Tuple[Dict[str, np.ndarray], str, int]:
    """Returns (tensors, config hash, epoch)"""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError(f"{path}: truncated")
        values = struct.unpack_from(fmt, blob, pos)
        pos += size
        return values

    def take_text(n: int, what: str, encoding: str) -> str:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated {what}")
        try:
            text = blob[pos:pos + n].decode(encoding)
        except UnicodeDecodeError:
            raise CheckpointError(f"{path}: corrupt {what}") from None
        pos += n
        return text

    (hash_len,) = take("<I")
    config_hash = take_text(hash_len, "config hash", "ascii")
    epoch, count = take("<QI")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = take_text(name_len, "tensor name", "utf-8")
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        if pos + 8 * n > len(blob):
            raise CheckpointError(f"{path}: truncated tensor '{name}'")
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
    return tensors, config_hash, int(epoch)


def _adam_tensors(prefix: str, state: AdamState) -> Dict[str, np.ndarray]:
    out = {f"{prefix}/step": np.array(float(state.step))}
    out.update({f"{prefix}/m/{k}": v for k, v in state.m.items()})
    out.update({f"{prefix}/v/{k}": v for k, v in state.v.items()})
    return out


def _adam_from(prefix: str, tensors: Dict[str, np.ndarray], lr: float) -> AdamState:
    state = AdamState(lr=lr, step=int(tensors.get(f"{prefix}/step", np.array(0.0))))
    for key, value in tensors.items():
        if key.startswith(f"{prefix}/m/"):
            state.m[key[len(prefix) + 3:]] = value
        elif key.startswith(f"{prefix}/v/"):
            state.v[key[len(prefix) + 3:]] = value
    return state


def save_bundle(path: str, bundle: ModelBundle, config_hash: str) -> None:
    """All four networks, both optimizer states and the epoch counter"""
    tensors: Dict[str, np.ndarray] = {}
    for net_name, net in bundle.networks().items():
        tensors.update({f"{net_name}/{k}": v for k, v in net.values().items()})
    tensors.update(_adam_tensors("adam_A", bundle.adam_a))
    tensors.update(_adam_tensors("adam_B", bundle.adam_b))
    write_tensors(path, tensors, config_hash, bundle.epoch)
    logger.info(f"Checkpoint written: {path} ({len(tensors)} tensors)")


def load_bundle(path: str, config: ExperimentConfig) -> ModelBundle:
    """Rebuild a bundle for ``config`` and fill it from a checkpoint with the same config hash"""
    tensors, stored_hash, epoch = read_tensors(path)
    expected = config.config_hash()
    if stored_hash != expected:
        raise CheckpointError(f"{path}: config hash {stored_hash[:12]} does not match {expected[:12]}")
    bundle = build_bundle(config, seed=0)
    for net_name, net in bundle.networks().items():
        prefix = f"{net_name}/"
        net.load_values({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    bundle.adam_a = _adam_from("adam_A", tensors, config.dmt.lr)
    bundle.adam_b = _adam_from("adam_B", tensors, config.dmt.lr)
    bundle.epoch = epoch
    return bundle

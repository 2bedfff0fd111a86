import hashlib
import json
from pathlib import Path
from typing import Any, Mapping, Union


def config_hash(payload: Mapping[str, Any]) -> str:
    """SHA-256 over canonical JSON (sorted keys, no whitespace)"""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def blob_hash(data: bytes) -> str:
    """Content hash computed the way git hashes a blob object"""
    header = f"blob {len(data)}\0".encode("ascii")
    return hashlib.sha1(header + data).hexdigest()


def file_blob_hash(path: Union[str, Path]) -> str:
    return blob_hash(Path(path).read_bytes())

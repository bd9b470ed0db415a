"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    bytes 0..7    magic  b"CCAPSCKP"
    bytes 8..11   format version (uint32), currently 1
    bytes 12..19  header length in bytes (uint64)
    header        canonical JSON (sorted keys, no whitespace), UTF-8
    payload       raw array bytes, concatenated in header order

The header carries a manifest (name, dtype, shape, offset, nbytes per
array, sorted by name) plus arbitrary JSON metadata under "meta". Given
identical arrays and metadata the emitted bytes are identical, which is
why this exists instead of an ``.npz`` (zip archives embed timestamps).

Writes are atomic: content goes to ``<path>.partial`` and is renamed into
place only when complete, so a crash never leaves a readable-but-corrupt
checkpoint at the final path.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CCAPSCKP"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Unreadable, truncated, or mismatched checkpoint file."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    """Stable identity of a configuration dict."""
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def save_checkpoint(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    """Write arrays + metadata; byte-identical output for identical state."""
    path = Path(path)
    manifest = []
    offset = 0
    names = sorted(arrays)
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        blob = arr.tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = canonical_json({"arrays": manifest, "meta": meta}).encode()

    partial = path.with_name(path.name + ".partial")
    with open(partial, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(partial, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint fully before returning; corrupt files raise
    :class:`CheckpointError` and hand back nothing partial."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 12 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = struct.unpack_from("<I", raw, len(MAGIC))[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header_len = struct.unpack_from("<Q", raw, len(MAGIC) + 4)[0]
    body_start = len(MAGIC) + 12
    header_end = body_start + header_len
    if header_end > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[body_start:header_end].decode())
        manifest = header["arrays"]
        meta = header["meta"]
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc

    arrays: dict[str, np.ndarray] = {}
    payload = raw[header_end:]
    for entry in manifest:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"{path}: truncated payload at array {entry['name']!r}")
        arr = np.frombuffer(payload[lo:hi], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, meta

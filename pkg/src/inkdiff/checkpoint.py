"""PDIF1 checkpoint container.

Layout::

    b"PDIF1" | u64 little-endian header length | header JSON | data section

The header holds ``metadata`` plus a ``tensors`` manifest of
``{name, shape, offset, nbytes}`` entries; offsets are relative to the data
section, which stores little-endian float32 arrays back to back.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PDIF1"
KINDS = ("denoiser", "autoencoder", "classifier", "lora-adapter")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, metadata: dict) -> None:
    if metadata.get("kind") not in KINDS:
        raise CheckpointError(f"metadata kind must be one of {KINDS}")
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype="<f4")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"metadata": metadata, "tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(tensors, metadata)``; raises CheckpointError on any format problem."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a PDIF1 checkpoint")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    if len(raw) < pos + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
        metadata = header["metadata"]
        entries = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc
    data = memoryview(raw)[pos + hlen :]
    tensors = {}
    spans = []
    for e in entries:
        try:
            name, shape, offset, nbytes = e["name"], tuple(e["shape"]), int(e["offset"]), int(e["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: malformed tensor entry {e!r}") from exc
        if nbytes != 4 * int(np.prod(shape)) or offset < 0:
            raise CheckpointError(f"{path}: tensor {name} has inconsistent size")
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: tensor {name} extends past end of file (truncated?)")
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor name {name}")
        spans.append((offset, offset + nbytes, name))
        tensors[name] = np.frombuffer(data[offset : offset + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointError(f"{path}: tensors {n0} and {n1} overlap")
    if metadata.get("kind") not in KINDS:
        raise CheckpointError(f"{path}: unknown checkpoint kind {metadata.get('kind')!r}")
    return tensors, metadata


def content_hash(tensors: dict) -> str:
    """SHA-256 over names, shapes and float32 bytes, independent of metadata."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype="<f4")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()

"""Named-tensor checkpoint container.

Two encodings share one logical layout (format version, metadata, ordered
named tensors):

* JSON: ``{"format": "dbsrl-ckpt", "version": 1, "meta": {...},
  "tensors": [{"name", "shape", "values"}, ...]}``. Floats are written with
  their shortest round-trip repr, so values come back exactly.
* binary: magic ``DBSRLCK1``, a little-endian u64 header length, a UTF-8 JSON
  header (meta plus name/shape per tensor), then the raw little-endian
  float64 payloads in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT = "dbsrl-ckpt"
VERSION = 1
MAGIC = b"DBSRLCK1"


class CheckpointError(ValueError):
    pass


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def dumps_json(tensors: dict[str, np.ndarray], meta: dict | None = None) -> str:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "meta": _to_jsonable(meta or {}),
        "tensors": [
            {"name": name, "shape": list(arr.shape), "values": np.asarray(arr, dtype=np.float64).ravel().tolist()}
            for name, arr in tensors.items()
        ],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def loads_json(text: str) -> tuple[dict[str, np.ndarray], dict]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"not a JSON checkpoint: {exc}") from None
    if doc.get("format") != FORMAT or doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint format {doc.get('format')!r} v{doc.get('version')!r}")
    tensors = {}
    for entry in doc["tensors"]:
        values = np.asarray(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"tensor {entry['name']!r}: {values.size} values for shape {shape}")
        tensors[entry["name"]] = values.reshape(shape)
    return tensors, doc["meta"]


def dumps_binary(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    header = {
        "format": FORMAT,
        "version": VERSION,
        "meta": _to_jsonable(meta or {}),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors.items()],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in tensors.values())
    return MAGIC + struct.pack("<Q", len(head)) + head + body


def loads_binary(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic; not a binary checkpoint")
    if len(blob) < 16:
        raise CheckpointError("binary checkpoint truncated before its header")
    (n,) = struct.unpack("<Q", blob[8:16])
    if 16 + n > len(blob):
        raise CheckpointError("binary checkpoint header truncated")
    try:
        header = json.loads(blob[16 : 16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt binary checkpoint header: {exc}") from None
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    offset = 16 + n
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"tensor {entry['name']!r} truncated")
        tensors[entry["name"]] = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    return tensors, header["meta"]


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None, binary: bool | None = None) -> None:
    """Write a checkpoint; encoding defaults to JSON unless the suffix is ``.bin``."""
    path = Path(path)
    if binary is None:
        binary = path.suffix == ".bin"
    if binary:
        path.write_bytes(dumps_binary(tensors, meta))
    else:
        path.write_text(dumps_json(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] == MAGIC:
        return loads_binary(blob)
    try:
        text = blob.decode()
    except UnicodeDecodeError:
        raise CheckpointError(f"{path} is neither a binary nor a JSON checkpoint") from None
    return loads_json(text)

"""Binary checkpoint format.

    offset  size  field
    0       4     magic b"WOTC"
    4       4     version (u32, little-endian)
    8       4     metadata length L (u32)
    12      L     UTF-8 JSON metadata (model spec, seed, epoch, layout table, ...)
    12+L    8     parameter count P (u64)
    20+L    4P    parameters, little-endian float32
"""
import json
import struct

import numpy as np

from .errors import CheckpointError
from .tensor import LayoutEntry, ParamVector

MAGIC = b"WOTC"
VERSION = 1


def layout_to_json(layout):
    return [[e.name, e.offset, e.length, list(e.shape)] for e in layout]


def layout_from_json(rows):
    return tuple(LayoutEntry(n, int(o), int(ln), tuple(s)) for n, o, ln, s in rows)


def save_checkpoint(path, w, meta=None):
    meta = dict(meta or {})
    meta["layout"] = layout_to_json(w.layout)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", w.values.size))
        fh.write(w.values.astype("<f4").tobytes())
    return path


def load_checkpoint(path):
    """Returns ``(ParamVector, meta)``; raises CheckpointError on any inconsistency."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, mlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + mlen + 8:
        raise CheckpointError(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[12:12 + mlen].decode("utf-8"))
        layout = layout_from_json(meta["layout"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata ({exc})") from exc
    count, = struct.unpack("<Q", raw[12 + mlen:20 + mlen])
    body = raw[20 + mlen:]
    if len(body) != 4 * count:
        raise CheckpointError(f"{path}: expected {count} parameters, found {len(body) // 4}")
    expected = sum(e.length for e in layout)
    if count != expected:
        raise CheckpointError(f"{path}: parameter count {count} does not match layout size {expected}")
    values = np.frombuffer(body, dtype="<f4").astype(np.float32)
    try:
        return ParamVector(values, layout), meta
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc

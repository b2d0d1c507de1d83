"""DIAGLAT1 container: magic, length-prefixed JSON header, float32 payload.

Layout: 8 bytes b"DIAGLAT1", a 4-byte little-endian header length, the UTF-8
JSON header, then raw little-endian float32 values, chunk-major. The header's
"shapes" key lists one shape per tensor; writing then reading reproduces both
header and payload byte-exactly (json round-trips preserve key order).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DIAGLAT1"


class ContainerError(ValueError):
    pass


def write_container(path: str | Path, header: dict, tensors: list[np.ndarray]) -> None:
    header = dict(header)
    header["shapes"] = [list(np.shape(t)) for t in tensors]
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def read_container(path: str | Path) -> tuple[dict, list[np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ContainerError("bad magic")
    if len(raw) < 12:
        raise ContainerError("truncated header length")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise ContainerError("truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"invalid header JSON: {exc}") from exc
    shapes = header.get("shapes")
    if shapes is None:
        raise ContainerError("header missing shapes")
    payload = raw[12 + hlen:]
    expected = sum(int(np.prod(s)) if s else 1 for s in shapes) * 4
    if len(payload) != expected:
        raise ContainerError(
            f"header/payload shape mismatch: expected {expected} payload bytes, "
            f"found {len(payload)}")
    tensors = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        tensors.append(arr.reshape(shape).astype(np.float64))
        offset += count * 4
    return header, tensors

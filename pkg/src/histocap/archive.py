"""Named-tensor binary archive, the weight/feature format shared by all models.

Layout: magic ``HCT1`` | u64 little-endian JSON header length | UTF-8 JSON
header mapping name -> {dtype: "f32", shape: [...], offset} | payload of
little-endian IEEE-754 float32, row-major, offsets ascending and gap-free.
Writes are bit-reproducible: names are sorted and the header is serialized
canonically.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError, ShapeError

MAGIC = b"HCT1"


def save_archive(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write ``tensors`` to ``path``; float32, sorted by name, gap-free."""
    names = sorted(tensors)
    header: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in names:
        arr = np.asarray(tensors[name], dtype="<f4")
        header[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset}
        raw = arr.tobytes()
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_archive(path: str | Path) -> dict[str, np.ndarray]:
    """Read an archive back as name -> float32 array; validates the layout."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read archive {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise DataError(f"{path}: bad magic, not a tensor archive")
    (head_len,) = struct.unpack("<Q", raw[4:12])
    if len(raw) < 12 + head_len:
        raise DataError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt header: {exc}") from exc

    payload = raw[12 + head_len:]
    out: dict[str, np.ndarray] = {}
    expected_offset = 0
    for name in sorted(header, key=lambda n: header[n]["offset"]):
        meta = header[name]
        if meta.get("dtype") != "f32":
            raise DataError(f"{path}: tensor {name} has unsupported dtype {meta.get('dtype')}")
        shape = tuple(int(s) for s in meta["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if meta["offset"] != expected_offset:
            raise DataError(f"{path}: offsets not ascending/gap-free at {name}")
        if meta["offset"] + nbytes > len(payload):
            raise DataError(f"{path}: truncated payload reading {name}")
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4,
                            offset=meta["offset"]).reshape(shape)
        out[name] = arr.copy()
        expected_offset += nbytes
    if expected_offset != len(payload):
        raise DataError(f"{path}: {len(payload) - expected_offset} trailing payload bytes")
    return out


def validate_tensors(got: Mapping[str, np.ndarray],
                     expected_shapes: Mapping[str, tuple[int, ...]],
                     context: str = "archive") -> None:
    """Check that every expected tensor is present with the right shape."""
    for name, shape in expected_shapes.items():
        if name not in got:
            raise DataError(f"{context}: missing tensor {name}")
        if tuple(got[name].shape) != tuple(shape):
            raise ShapeError(
                f"{context}: tensor {name} has shape {tuple(got[name].shape)}, "
                f"expected {tuple(shape)}")

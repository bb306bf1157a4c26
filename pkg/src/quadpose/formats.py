"""On-disk formats: DPT1 depth, MSK1 masks, binary PPM, QPW1 weights, QPD1 databases.

All multi-byte values are little-endian.  Writers are byte-deterministic.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

DPT_MAGIC = b"DPT1"
MSK_MAGIC = b"MSK1"
QPW_MAGIC = b"QPW1"
QPD_MAGIC = b"QPD1"


def _read(path) -> bytes:
    return Path(path).read_bytes()


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _grid_bytes(magic: bytes, arr: np.ndarray, dtype: str) -> bytes:
    h, w = arr.shape
    return magic + struct.pack("<II", w, h) + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def _parse_grid(blob: bytes, magic: bytes, dtype: str, path) -> np.ndarray:
    if blob[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, got {blob[:4]!r}")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header")
    w, h = struct.unpack("<II", blob[4:12])
    itemsize = np.dtype(dtype).itemsize
    if len(blob) != 12 + w * h * itemsize:
        raise FormatError(f"{path}: payload size does not match {w}x{h}")
    return np.frombuffer(blob, dtype=dtype, offset=12).reshape(h, w).copy()


def write_dpt(path, depth: np.ndarray) -> None:
    Path(path).write_bytes(_grid_bytes(DPT_MAGIC, depth, "<f4"))


def read_dpt(path) -> np.ndarray:
    return _parse_grid(_read(path), DPT_MAGIC, "<f4", path).astype(np.float64)


def write_mask(path, mask: np.ndarray) -> None:
    Path(path).write_bytes(_grid_bytes(MSK_MAGIC, (np.asarray(mask) != 0), "u1"))


def read_mask(path) -> np.ndarray:
    return _parse_grid(_read(path), MSK_MAGIC, "u1", path)


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    data = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def read_ppm(path) -> np.ndarray:
    blob = _read(path)
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise FormatError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(fields[1]), int(fields[2])
    pos += 1
    data = np.frombuffer(blob, dtype=np.uint8, offset=pos)
    if data.size != w * h * 3:
        raise FormatError(f"{path}: payload size does not match {w}x{h}")
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# weights: magic, u32 manifest length, manifest JSON, float32 payload


def weights_to_bytes(named_arrays: dict[str, np.ndarray]) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, arr in named_arrays.items():
        a = np.asarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.size
    head = _dump_json(manifest).encode("utf-8")
    return QPW_MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)


def weights_from_bytes(blob: bytes, path="<bytes>") -> dict[str, np.ndarray]:
    if blob[:4] != QPW_MAGIC:
        raise FormatError(f"{path}: not a QPW1 weight file")
    (n,) = struct.unpack("<I", blob[4:8])
    manifest = json.loads(blob[8:8 + n].decode("utf-8"))
    payload = np.frombuffer(blob, dtype="<f4", offset=8 + n)
    out = {}
    for item in manifest:
        size = int(np.prod(item["shape"], dtype=np.int64))
        start = item["offset"]
        if start + size > payload.size:
            raise FormatError(f"{path}: tensor {item['name']} runs past end of file")
        out[item["name"]] = payload[start:start + size].reshape(tuple(item["shape"])).copy()
    return out


def write_weights(path, named_arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(weights_to_bytes(named_arrays))


def read_weights(path) -> dict[str, np.ndarray]:
    return weights_from_bytes(_read(path), path)


# ---------------------------------------------------------------------------
# descriptor database: magic, u32 dim, u32 count, then per entry d+3 float32 and a u32 view id


def database_to_bytes(descriptors: np.ndarray, points: np.ndarray, view_ids: np.ndarray) -> bytes:
    n, d = descriptors.shape
    rec = np.dtype([("desc", "<f4", (d,)), ("point", "<f4", (3,)), ("view", "<u4")])
    table = np.zeros(n, dtype=rec)
    table["desc"] = descriptors
    table["point"] = points
    table["view"] = view_ids
    return QPD_MAGIC + struct.pack("<II", d, n) + table.tobytes()


def database_from_bytes(blob: bytes, path="<bytes>"):
    if blob[:4] != QPD_MAGIC:
        raise FormatError(f"{path}: not a QPD1 database")
    d, n = struct.unpack("<II", blob[4:12])
    rec = np.dtype([("desc", "<f4", (d,)), ("point", "<f4", (3,)), ("view", "<u4")])
    if len(blob) != 12 + n * rec.itemsize:
        raise FormatError(f"{path}: payload size does not match {n} entries of dim {d}")
    table = np.frombuffer(blob, dtype=rec, offset=12)
    return table["desc"].copy(), table["point"].astype(np.float64), table["view"].astype(np.int64)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())

"""Checkpoint and index persistence.

Binary layout: magic ``RABX``, u32 version, u32 array count, then per array
a length-prefixed UTF-8 name, a u8 dtype code, u32 rank, u32 extents, and
the raw little-endian payload; a CRC32 over all payload bytes trails the
file. Stage/seed/config-hash metadata rides in a reserved ``__meta__``
byte array. Float arrays are stored single precision.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError

MAGIC = b"RABX"
VERSION = 1
META_KEY = "__meta__"

_DTYPE_CODES = {"<f4": 0, "<f8": 1, "<i8": 2, "|u1": 3}
_CODE_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "|u1"}

STAGES = ("fusion", "retriever", "ranker", "generator", "index")


@dataclass
class CheckpointManifest:
    stage: str
    seed: int
    config_hash: str
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def array(self, name: str) -> np.ndarray:
        return self.arrays[name]


def _storage_array(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        return np.ascontiguousarray(arr, dtype="<f4")
    if arr.dtype.kind in "iu" and arr.dtype.itemsize > 1:
        return np.ascontiguousarray(arr, dtype="<i8")
    if arr.dtype == np.uint8:
        return np.ascontiguousarray(arr)
    raise FormatError(f"unsupported array dtype {arr.dtype}")


def save_manifest(path, manifest: CheckpointManifest) -> None:
    if manifest.stage not in STAGES:
        raise FormatError(f"unknown stage {manifest.stage!r}")
    meta = json.dumps({"stage": manifest.stage, "seed": manifest.seed,
                       "config_hash": manifest.config_hash},
                      sort_keys=True).encode("utf-8")
    entries: list[tuple[str, np.ndarray]] = [
        (META_KEY, np.frombuffer(meta, dtype=np.uint8))]
    entries += [(name, _storage_array(arr))
                for name, arr in manifest.arrays.items()]
    crc = 0
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            code = _DTYPE_CODES[arr.dtype.str]
            fh.write(struct.pack("<BI", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            payload = arr.tobytes()
            crc = zlib.crc32(payload, crc)
            fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_manifest(path) -> CheckpointManifest:
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(blob):
            raise CorruptionError(f"truncated checkpoint {path}")
        chunk = view[off:off + n]
        off += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError(f"bad magic in {path}")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported version {version} in {path}")
    arrays: dict[str, np.ndarray] = {}
    crc = 0
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        code, rank = struct.unpack("<BI", take(5))
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} in {path}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = np.dtype(_CODE_DTYPES[code])
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = bytes(take(n_bytes))
        crc = zlib.crc32(payload, crc)
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    (stored,) = struct.unpack("<I", take(4))
    if off != len(blob):
        raise CorruptionError(f"trailing bytes in {path}")
    if stored != crc:
        raise CorruptionError(f"checksum mismatch in {path}")
    if META_KEY not in arrays:
        raise FormatError(f"missing metadata record in {path}")
    meta = json.loads(arrays.pop(META_KEY).tobytes().decode("utf-8"))
    return CheckpointManifest(stage=meta["stage"], seed=int(meta["seed"]),
                              config_hash=meta["config_hash"], arrays=arrays)


def params_to_arrays(params) -> dict[str, np.ndarray]:
    return {p.name: p.data for p in params}


def load_params_from(manifest: CheckpointManifest, params) -> None:
    """Copy stored values into existing parameters by name (f32 -> f64)."""
    for p in params:
        if p.name not in manifest.arrays:
            raise FormatError(f"checkpoint missing parameter {p.name}")
        stored = manifest.arrays[p.name].astype(np.float64)
        if stored.shape != p.data.shape:
            raise FormatError(
                f"shape mismatch for {p.name}: {stored.shape} vs {p.data.shape}")
        p.tensor.data[...] = stored


def ids_to_bytes(ids: list[str]) -> np.ndarray:
    return np.frombuffer(json.dumps(ids).encode("utf-8"), dtype=np.uint8)


def bytes_to_ids(arr: np.ndarray) -> list[str]:
    return json.loads(arr.tobytes().decode("utf-8"))

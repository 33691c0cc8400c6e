"""Reading and writing checkpoints in the safetensors byte layout.

Layout: ``[u64 LE header length N][N bytes UTF-8 JSON header][data]``. Each
header entry maps a tensor name to ``{"dtype", "shape", "data_offsets"}`` with
offsets relative to the start of the data section. Only F32 and F16 are
accepted.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from .errors import (
    DuplicateName,
    MalformedHeader,
    NonFiniteValue,
    OffsetError,
    UnsupportedDtype,
)

DTYPE_SIZES = {"F32": 4, "F16": 2}
NUMPY_DTYPES = {"F32": np.dtype("<f4"), "F16": np.dtype("<f2")}

# Valid safetensors dtypes we deliberately do not handle.
_KNOWN_UNSUPPORTED = {
    "BOOL", "U8", "I8", "F8_E5M2", "F8_E4M3", "I16", "U16", "BF16",
    "I32", "U32", "I64", "U64", "F64",
}

METADATA_KEY = "__metadata__"


@dataclass(frozen=True)
class TensorRecord:
    name: str
    dtype: str
    shape: Tuple[int, ...]
    data: bytes = field(repr=False)

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise ValueError("tensor name must be non-empty text")
        if self.dtype not in DTYPE_SIZES:
            raise UnsupportedDtype(f"{self.name}: dtype {self.dtype!r} not in {{F32, F16}}")
        shape = tuple(int(d) for d in self.shape)
        if not 1 <= len(shape) <= 4 or any(d < 0 for d in shape):
            raise ValueError(f"{self.name}: invalid shape {list(shape)}")
        object.__setattr__(self, "shape", shape)
        expected = math.prod(shape) * DTYPE_SIZES[self.dtype]
        if len(self.data) != expected:
            raise ValueError(
                f"{self.name}: {len(self.data)} data bytes, expected {expected}"
            )

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return len(self.data)

    def array(self) -> np.ndarray:
        """Read-only view of the data in its storage dtype, with shape applied."""
        return np.frombuffer(self.data, dtype=NUMPY_DTYPES[self.dtype]).reshape(self.shape)

    @classmethod
    def from_array(cls, name: str, arr: np.ndarray, dtype: Optional[str] = None) -> "TensorRecord":
        if dtype is None:
            dtype = {np.dtype("float32"): "F32", np.dtype("float16"): "F16"}.get(arr.dtype)
            if dtype is None:
                raise UnsupportedDtype(f"{name}: cannot infer dtype from {arr.dtype}")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        data = np.ascontiguousarray(arr, dtype=NUMPY_DTYPES[dtype]).tobytes()
        return cls(name, dtype, tuple(arr.shape), data)


@dataclass
class Checkpoint:
    tensors: List[TensorRecord] = field(default_factory=list)
    metadata: Optional[Dict[str, str]] = None

    def __post_init__(self):
        seen = set()
        for rec in self.tensors:
            if rec.name in seen:
                raise DuplicateName(f"duplicate tensor name {rec.name!r}")
            seen.add(rec.name)

    def __len__(self) -> int:
        return len(self.tensors)

    def __iter__(self) -> Iterator[TensorRecord]:
        return iter(self.tensors)

    def __contains__(self, name: str) -> bool:
        return any(rec.name == name for rec in self.tensors)

    def __getitem__(self, name: str) -> TensorRecord:
        for rec in self.tensors:
            if rec.name == name:
                return rec
        raise KeyError(name)

    def names(self) -> List[str]:
        return [rec.name for rec in self.tensors]

    def as_dict(self) -> Dict[str, TensorRecord]:
        return {rec.name: rec for rec in self.tensors}


def _parse_header(raw: bytes) -> dict:
    def no_dupes(pairs):
        out = {}
        for key, value in pairs:
            if key in out:
                raise MalformedHeader(f"duplicate key {key!r} in header")
            out[key] = value
        return out

    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=no_dupes)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"invalid JSON header: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeader("header is not a JSON object")
    return header


def _is_uint(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool) and x >= 0


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise MalformedHeader(f"{path}: file shorter than the 8-byte header length")
    (n,) = struct.unpack_from("<Q", blob, 0)
    if n == 0:
        raise MalformedHeader("header length is zero")
    if n > len(blob) - 8:
        raise MalformedHeader(f"header length {n} exceeds file size {len(blob)}")
    header = _parse_header(blob[8 : 8 + n])
    data = memoryview(blob)[8 + n :]

    metadata = header.pop(METADATA_KEY, None)
    if metadata is not None:
        if not isinstance(metadata, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
        ):
            raise MalformedHeader("__metadata__ must map strings to strings")

    entries = []
    for name, info in header.items():
        if not name:
            raise MalformedHeader("empty tensor name")
        if not isinstance(info, dict):
            raise MalformedHeader(f"{name}: entry is not an object")
        dtype = info.get("dtype")
        shape = info.get("shape")
        offsets = info.get("data_offsets")
        if dtype in _KNOWN_UNSUPPORTED:
            raise UnsupportedDtype(f"{name}: dtype {dtype} is not supported")
        if dtype not in DTYPE_SIZES:
            raise MalformedHeader(f"{name}: unknown dtype {dtype!r}")
        if not isinstance(shape, list) or not all(_is_uint(d) for d in shape):
            raise MalformedHeader(f"{name}: invalid shape {shape!r}")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(_is_uint(o) for o in offsets)
        ):
            raise MalformedHeader(f"{name}: invalid data_offsets {offsets!r}")
        begin, end = offsets
        if end < begin:
            raise OffsetError(f"{name}: data_offsets end before begin")
        if end > len(data):
            raise OffsetError(f"{name}: data range [{begin}, {end}) out of bounds ({len(data)} bytes)")
        if end - begin != math.prod(shape) * DTYPE_SIZES[dtype]:
            raise OffsetError(f"{name}: byte range length does not match shape and dtype")
        entries.append((name, dtype, shape, begin, end))

    # The data section must be tiled exactly: no gaps, no overlaps.
    cursor = 0
    for name, _, _, begin, end in sorted(entries, key=lambda e: (e[3], e[4])):
        if begin < cursor:
            raise OffsetError(f"{name}: data range overlaps a previous tensor")
        if begin > cursor:
            raise OffsetError(f"{name}: gap in data section before offset {begin}")
        cursor = end
    if cursor != len(data):
        raise OffsetError(f"{len(data) - cursor} trailing bytes after last tensor")

    tensors = []
    for name, dtype, shape, begin, end in entries:
        try:
            tensors.append(TensorRecord(name, dtype, tuple(shape), bytes(data[begin:end])))
        except ValueError as exc:
            raise MalformedHeader(str(exc)) from exc
    return Checkpoint(tensors, metadata)


def header_bytes(ckpt: Checkpoint) -> bytes:
    header = {}
    if ckpt.metadata is not None:
        header[METADATA_KEY] = dict(ckpt.metadata)
    offset = 0
    for rec in ckpt.tensors:
        if rec.name in header:
            raise DuplicateName(f"duplicate tensor name {rec.name!r}")
        header[rec.name] = {
            "dtype": rec.dtype,
            "shape": list(rec.shape),
            "data_offsets": [offset, offset + rec.nbytes],
        }
        offset += rec.nbytes
    return json.dumps(header, separators=(",", ":")).encode("utf-8")


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    raw = header_bytes(ckpt)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for rec in ckpt.tensors:
            fh.write(rec.data)
    os.replace(tmp, path)


def to_f64(rec: TensorRecord) -> np.ndarray:
    """Flat row-major float64 copy of the tensor; rejects inf/NaN."""
    out = np.frombuffer(rec.data, dtype=NUMPY_DTYPES[rec.dtype]).astype(np.float64)
    if not np.isfinite(out).all():
        raise NonFiniteValue(f"{rec.name}: tensor contains inf or NaN")
    return out


def checkpoint_from_arrays(arrays, dtype: str = "F32") -> Checkpoint:
    """Build from (name, array) pairs or a name -> array mapping."""
    if isinstance(arrays, Mapping):
        arrays = arrays.items()
    return Checkpoint([TensorRecord.from_array(name, arr, dtype) for name, arr in arrays])

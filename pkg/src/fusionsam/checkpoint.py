"""Versioned named-tensor checkpoint file.

Layout (all integers little-endian):

    magic  b"FSAM"
    u32    format version
    u32    entry count
    entry* sorted by name:
        u16   name byte length
        ...   UTF-8 name
        u8    dtype code (0=f64, 1=f32, 2=i64, 3=u8, 4=u64)
        u8    rank
        u32*  dims
        ...   raw row-major payload

Loading then saving reproduces the byte stream exactly: dtypes are
preserved and the canonical name ordering fixes the layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

MAGIC = b"FSAM"
FORMAT_VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f8"): 0,
    np.dtype("<f4"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
    np.dtype("<u8"): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    version: int
    table: dict[str, np.ndarray]

    def save(self, path: str) -> None:
        save_table(path, self.table, self.version)

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        version, table = load_table(path)
        return cls(version=version, table=table)


def save_table(path: str, table: dict[str, np.ndarray], version: int = FORMAT_VERSION) -> None:
    chunks = [MAGIC, struct.pack("<II", version, len(table))]
    for name in sorted(table):
        arr = np.ascontiguousarray(table[name])
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dtype, copy=False)
        if arr.dtype not in _DTYPE_CODES:
            raise DataError(f"checkpoint entry {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise DataError(f"checkpoint entry name too long: {name[:32]!r}...")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_table(path: str) -> tuple[int, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    table: dict[str, np.ndarray] = {}
    offset = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        code, rank = struct.unpack_from("<BB", blob, offset)
        offset += 2
        if code not in _CODE_DTYPES:
            raise DataError(f"{path}: entry {name!r} has unknown dtype code {code}")
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        payload = blob[offset : offset + nbytes]
        if len(payload) != nbytes:
            raise DataError(f"{path}: truncated payload for entry {name!r}")
        offset += nbytes
        table[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes after last entry")
    return version, table

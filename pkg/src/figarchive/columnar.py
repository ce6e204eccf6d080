"""Self-describing columnar metadata file (FGC1) for predicate scans.

Layout (all integers little-endian; full byte spec in docs/columnar_format.md):

    bytes 0..3    magic "FGC1"
    bytes 4..7    uint32 header length H
    bytes 8..8+H  UTF-8 JSON header:
                  {"n_rows": N, "columns": [{"name", "type",
                   "offset", "length", "nulls_offset", "nulls_length"}]}
    then          column blocks; offsets are relative to the data section
                  start (byte 8 + H)

Column encodings by type:

    int     N x int64
    float   N x float64
    bool    N x uint8
    string  (N+1) x uint64 end-offsets, then the UTF-8 blob
    json    same as string; values are canonical JSON documents

Null bitmaps are ceil(N/8) bytes, bit i of byte i//8 set when row i is null.
Reading one column touches only that column's byte ranges.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Iterable, Sequence

from .errors import ParseError, SchemaError, ValidationError

MAGIC = b"FGC1"


def _classify(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    if isinstance(value, float):
        return "float"
    if isinstance(value, str):
        return "string"
    if isinstance(value, (list, tuple, dict)):
        return "json"
    raise ValidationError(f"unsupported value type {type(value).__name__}")


def _unify(name: str, kinds: set[str]) -> str:
    kinds = kinds - {"null"}
    if not kinds:
        return "json"
    if kinds == {"int"}:
        return "int"
    if kinds <= {"int", "float"}:
        return "float"
    if len(kinds) == 1:
        return kinds.pop()
    raise SchemaError(f"column {name!r} mixes incompatible types: {sorted(kinds)}")


def _null_bitmap(values: Sequence[Any]) -> bytes:
    bits = bytearray((len(values) + 7) // 8)
    for i, v in enumerate(values):
        if v is None:
            bits[i // 8] |= 1 << (i % 8)
    return bytes(bits)


def _encode(col_type: str, values: Sequence[Any]) -> bytes:
    n = len(values)
    if col_type == "int":
        return struct.pack(f"<{n}q", *(0 if v is None else int(v) for v in values))
    if col_type == "float":
        return struct.pack(f"<{n}d", *(0.0 if v is None else float(v) for v in values))
    if col_type == "bool":
        return bytes(0 if v is None else int(bool(v)) for v in values)
    if col_type in ("string", "json"):
        encoded = [
            b"" if v is None
            else (v.encode("utf-8") if col_type == "string"
                  else json.dumps(v, ensure_ascii=False, sort_keys=True).encode("utf-8"))
            for v in values
        ]
        offsets = [0]
        for blob in encoded:
            offsets.append(offsets[-1] + len(blob))
        return struct.pack(f"<{n + 1}Q", *offsets) + b"".join(encoded)
    raise ValidationError(f"unknown column type {col_type}")


def write_columnar(rows: Sequence[dict], path: str | Path, columns: Sequence[str] | None = None) -> Path:
    """Write rows (all sharing one key set) as an FGC1 file.

    A row whose key set differs from the first row's is schema drift and
    raises :class:`SchemaError` naming the offending field.  An explicit
    ``columns`` order may be given; default is the first row's order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if rows:
        base_keys = list(rows[0].keys())
        base_set = set(base_keys)
        for i, row in enumerate(rows):
            keys = set(row.keys())
            if keys != base_set:
                diff = sorted(keys.symmetric_difference(base_set))
                raise SchemaError(f"schema drift at row {i}: field {diff[0]!r}")
        names = list(columns) if columns is not None else base_keys
    else:
        names = list(columns or [])

    blocks: list[tuple[str, str, bytes, bytes]] = []
    for name in names:
        values = [row[name] for row in rows]
        col_type = _unify(name, {_classify(v) for v in values})
        blocks.append((name, col_type, _encode(col_type, values), _null_bitmap(values)))

    descriptors = []
    offset = 0
    for name, col_type, data, nulls in blocks:
        descriptors.append({
            "name": name, "type": col_type,
            "offset": offset, "length": len(data),
            "nulls_offset": offset + len(data), "nulls_length": len(nulls),
        })
        offset += len(data) + len(nulls)

    header = json.dumps({"n_rows": len(rows), "columns": descriptors}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, _, data, nulls in blocks:
            fh.write(data)
            fh.write(nulls)
    return path


class ColumnarReader:
    """Column-at-a-time reader; opening parses only the header."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            magic = fh.read(4)
            if magic != MAGIC:
                raise ParseError(f"{self.path}: not an FGC1 file")
            (header_len,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(header_len).decode("utf-8"))
        self.n_rows: int = header["n_rows"]
        self._columns: dict[str, dict] = {c["name"]: c for c in header["columns"]}
        self._data_start = 8 + header_len

    @property
    def column_names(self) -> list[str]:
        return list(self._columns)

    def _read_range(self, offset: int, length: int) -> bytes:
        with open(self.path, "rb") as fh:
            fh.seek(self._data_start + offset)
            return fh.read(length)

    def read_column(self, name: str) -> list[Any]:
        if name not in self._columns:
            raise SchemaError(f"no such column {name!r}")
        desc = self._columns[name]
        raw = self._read_range(desc["offset"], desc["length"])
        nulls = self._read_range(desc["nulls_offset"], desc["nulls_length"])
        n = self.n_rows
        col_type = desc["type"]
        if col_type == "int":
            values: list[Any] = list(struct.unpack(f"<{n}q", raw))
        elif col_type == "float":
            values = list(struct.unpack(f"<{n}d", raw))
        elif col_type == "bool":
            values = [bool(b) for b in raw]
        elif col_type in ("string", "json"):
            offsets = struct.unpack(f"<{n + 1}Q", raw[: 8 * (n + 1)])
            blob = raw[8 * (n + 1):]
            texts = [blob[offsets[i]:offsets[i + 1]].decode("utf-8") for i in range(n)]
            values = texts if col_type == "string" else [json.loads(t) if t else None for t in texts]
        else:
            raise ParseError(f"unknown column type {col_type}")
        return [
            None if nulls[i // 8] & (1 << (i % 8)) else values[i]
            for i in range(n)
        ]

    def filter_equals(self, name: str, value: Any) -> list[int]:
        """Row indices where the column equals ``value`` (scans one column)."""
        return [i for i, v in enumerate(self.read_column(name)) if v == value]

    def read_rows(self, indices: Iterable[int], columns: Sequence[str] | None = None) -> list[dict]:
        indices = list(indices)
        names = list(columns) if columns is not None else self.column_names
        data = {name: self.read_column(name) for name in names}
        return [{name: data[name][i] for name in names} for i in indices]

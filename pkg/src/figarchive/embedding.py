"""Pluggable image-embedding backends and the aligned embedding matrix.

Backends map image bytes to a fixed-dimension real vector.  Shipped backends:
a deterministic hash-seeded test backend, and an external-process backend
speaking a small length-prefixed binary protocol on stdin/stdout so a real
vision model can be attached out of process:

    request:  uint32 LE payload length, then the image bytes
    response: uint32 LE vector length d, then d float32 LE values

Matrices persist as a flat little-endian float32 binary next to a JSON header
``{n, d, row_keys_file}`` and a one-key-per-line text file.
"""

from __future__ import annotations

import hashlib
import json
import struct
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import ValidationError


@dataclass
class EmbeddingMatrix:
    values: np.ndarray  # (n, d) float32
    row_keys: list[str]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValidationError("embedding matrix must be 2-D")
        if len(self.row_keys) != self.values.shape[0]:
            raise ValidationError("row_keys length must equal row count")
        if len(set(self.row_keys)) != len(self.row_keys):
            raise ValidationError("row_keys must be unique")
        if not np.isfinite(self.values).all():
            raise ValidationError("embedding matrix contains NaN/Inf")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def row(self, key: str) -> np.ndarray:
        return self.values[self.row_keys.index(key)]


class EmbeddingBackend(Protocol):
    dim: int

    def embed(self, image_bytes: bytes) -> np.ndarray: ...


class HashEmbeddingBackend:
    """Deterministic test backend: sha256(image bytes) seeds a unit vector."""

    def __init__(self, dim: int = 64):
        self.dim = dim

    def embed(self, image_bytes: bytes) -> np.ndarray:
        digest = hashlib.sha256(image_bytes).digest()
        seed = int.from_bytes(digest[:8], "little")
        rng = np.random.default_rng(seed)
        vec = rng.standard_normal(self.dim)
        return (vec / np.linalg.norm(vec)).astype(np.float32)


class ExternalProcessBackend:
    """Backend delegating to a child process via the binary protocol above."""

    def __init__(self, command: Sequence[str], dim: int):
        self.command = list(command)
        self.dim = dim
        self._proc: subprocess.Popen | None = None

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE
            )
        return self._proc

    def embed(self, image_bytes: bytes) -> np.ndarray:
        proc = self._ensure()
        assert proc.stdin is not None and proc.stdout is not None
        proc.stdin.write(struct.pack("<I", len(image_bytes)) + image_bytes)
        proc.stdin.flush()
        header = proc.stdout.read(4)
        if len(header) != 4:
            raise RuntimeError("embedding process closed its pipe")
        (d,) = struct.unpack("<I", header)
        payload = proc.stdout.read(4 * d)
        if len(payload) != 4 * d:
            raise RuntimeError("short read from embedding process")
        vec = np.frombuffer(payload, dtype="<f4").copy()
        if d != self.dim:
            raise ValidationError(f"embedding process returned dim {d}, expected {self.dim}")
        return vec

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)


def embed_images(
    images: Iterable[tuple[str, bytes]],
    backend: EmbeddingBackend,
) -> tuple[EmbeddingMatrix, list[str]]:
    """Embed a (key, bytes) stream; rows follow stream order.

    Returns the matrix plus a skip list of keys whose embedding failed; a
    failure never silently drops an image.
    """
    rows: list[np.ndarray] = []
    keys: list[str] = []
    skipped: list[str] = []
    for key, data in images:
        try:
            vec = np.asarray(backend.embed(data), dtype=np.float32)
        except Exception:
            skipped.append(key)
            continue
        if vec.ndim != 1:
            skipped.append(key)
            continue
        rows.append(vec)
        keys.append(key)
    if rows:
        values = np.vstack(rows)
    else:
        values = np.zeros((0, getattr(backend, "dim", 0)), dtype=np.float32)
    return EmbeddingMatrix(values=values, row_keys=keys), skipped


def save_embeddings(matrix: EmbeddingMatrix, out_dir: str | Path, name: str) -> Path:
    """Persist as ``name.bin`` + ``name.keys.txt`` + ``name.json`` header;
    returns the header path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bin_path = out_dir / f"{name}.bin"
    keys_path = out_dir / f"{name}.keys.txt"
    header_path = out_dir / f"{name}.json"
    matrix.values.astype("<f4").tofile(bin_path)
    keys_path.write_text("".join(k + "\n" for k in matrix.row_keys), encoding="utf-8")
    header_path.write_text(
        json.dumps(
            {"n": matrix.n, "d": matrix.d, "dtype": "<f4",
             "data_file": bin_path.name, "row_keys_file": keys_path.name}
        )
    )
    return header_path


def load_embeddings(header_path: str | Path) -> EmbeddingMatrix:
    header_path = Path(header_path)
    header = json.loads(header_path.read_text())
    data = np.fromfile(header_path.parent / header["data_file"], dtype="<f4")
    values = data.reshape(header["n"], header["d"])
    keys = (header_path.parent / header["row_keys_file"]).read_text(encoding="utf-8").splitlines()
    return EmbeddingMatrix(values=values, row_keys=keys)

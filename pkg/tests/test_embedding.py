from __future__ import annotations

import sys
import textwrap

import numpy as np
import pytest

from figarchive.embedding import (
    EmbeddingMatrix,
    ExternalProcessBackend,
    HashEmbeddingBackend,
    embed_images,
    load_embeddings,
    save_embeddings,
)
from figarchive.errors import ValidationError


class TestHashBackend:
    def test_three_images_rerun_bit_identical(self):
        backend = HashEmbeddingBackend(dim=32)
        images = [(f"k{i}", bytes([i]) * 10) for i in range(3)]
        m1, skipped1 = embed_images(images, backend)
        m2, skipped2 = embed_images(images, backend)
        assert skipped1 == skipped2 == []
        assert m1.values.shape == (3, 32)
        assert np.array_equal(m1.values, m2.values)
        assert m1.row_keys == ["k0", "k1", "k2"]

    def test_duplicate_bytes_identical_rows(self):
        backend = HashEmbeddingBackend(dim=16)
        matrix, _ = embed_images([("a", b"same"), ("b", b"same")], backend)
        assert np.array_equal(matrix.values[0], matrix.values[1])

    def test_unit_norm(self):
        vec = HashEmbeddingBackend(dim=48).embed(b"x")
        assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-5)


class TestEmbedImages:
    def test_backend_failure_goes_to_skip_list(self):
        class Flaky:
            dim = 8

            def embed(self, data):
                if data == b"bad":
                    raise RuntimeError("boom")
                return np.ones(8, dtype=np.float32)

        images = [(f"k{i}", b"ok") for i in range(4)] + [("k4", b"bad")]
        matrix, skipped = embed_images(images, Flaky())
        assert matrix.n == 4
        assert skipped == ["k4"]

    def test_empty_stream(self):
        matrix, skipped = embed_images([], HashEmbeddingBackend(dim=8))
        assert matrix.n == 0 and matrix.d == 8 and skipped == []


class TestMatrixInvariants:
    def test_rejects_nan(self):
        with pytest.raises(ValidationError):
            EmbeddingMatrix(values=np.array([[np.nan, 1.0]]), row_keys=["a"])

    def test_rejects_duplicate_keys(self):
        with pytest.raises(ValidationError):
            EmbeddingMatrix(values=np.zeros((2, 2)), row_keys=["a", "a"])

    def test_rejects_key_count_mismatch(self):
        with pytest.raises(ValidationError):
            EmbeddingMatrix(values=np.zeros((2, 2)), row_keys=["a"])


class TestPersistence:
    def test_round_trip(self, tmp_path):
        backend = HashEmbeddingBackend(dim=24)
        matrix, _ = embed_images([(f"img{i}", bytes([i, i + 1])) for i in range(5)], backend)
        header = save_embeddings(matrix, tmp_path, "emb")
        loaded = load_embeddings(header)
        assert loaded.row_keys == matrix.row_keys
        assert np.array_equal(loaded.values, matrix.values)

    def test_header_contents(self, tmp_path):
        import json

        matrix, _ = embed_images([("a", b"1")], HashEmbeddingBackend(dim=4))
        header = save_embeddings(matrix, tmp_path, "emb")
        meta = json.loads(header.read_text())
        assert meta["n"] == 1 and meta["d"] == 4
        assert meta["dtype"] == "<f4"
        assert (tmp_path / meta["row_keys_file"]).read_text() == "a\n"
        assert (tmp_path / meta["data_file"]).stat().st_size == 4 * 4


ECHO_WORKER = textwrap.dedent(
    """
    import struct, sys, hashlib
    DIM = 6
    while True:
        header = sys.stdin.buffer.read(4)
        if len(header) < 4:
            break
        (n,) = struct.unpack("<I", header)
        payload = sys.stdin.buffer.read(n)
        seed = hashlib.md5(payload).digest()
        vals = [b / 255.0 for b in seed[:DIM]]
        sys.stdout.buffer.write(struct.pack("<I", DIM))
        sys.stdout.buffer.write(struct.pack(f"<{DIM}f", *vals))
        sys.stdout.buffer.flush()
    """
)


class TestExternalProcessBackend:
    def test_round_trips_through_child_process(self):
        backend = ExternalProcessBackend([sys.executable, "-c", ECHO_WORKER], dim=6)
        try:
            v1 = backend.embed(b"hello")
            v2 = backend.embed(b"hello")
            v3 = backend.embed(b"other")
            assert v1.shape == (6,)
            assert np.array_equal(v1, v2)
            assert not np.array_equal(v1, v3)
        finally:
            backend.close()

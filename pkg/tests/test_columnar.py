from __future__ import annotations

import json

import pytest

from figarchive.columnar import ColumnarReader, write_columnar
from figarchive.errors import ParseError, SchemaError


def rows_fixture():
    return [
        {"key": "a", "count": 1, "score": 0.5, "ok": True, "tags": ["x", "y"], "note": None},
        {"key": "b", "count": 2, "score": 1.5, "ok": False, "tags": [], "note": "hello"},
        {"key": "c", "count": None, "score": 2.0, "ok": True, "tags": ["z"], "note": "bye"},
    ]


class TestRoundTrip:
    def test_all_types(self, tmp_path):
        rows = rows_fixture()
        path = write_columnar(rows, tmp_path / "meta.fgc")
        reader = ColumnarReader(path)
        assert reader.n_rows == 3
        assert reader.column_names == ["key", "count", "score", "ok", "tags", "note"]
        assert reader.read_column("key") == ["a", "b", "c"]
        assert reader.read_column("count") == [1, 2, None]
        assert reader.read_column("score") == [0.5, 1.5, 2.0]
        assert reader.read_column("ok") == [True, False, True]
        assert reader.read_column("tags") == [["x", "y"], [], ["z"]]
        assert reader.read_column("note") == [None, "hello", "bye"]

    def test_read_rows(self, tmp_path):
        path = write_columnar(rows_fixture(), tmp_path / "meta.fgc")
        out = ColumnarReader(path).read_rows([2, 0], columns=["key", "score"])
        assert out == [{"key": "c", "score": 2.0}, {"key": "a", "score": 0.5}]

    def test_unicode_strings(self, tmp_path):
        rows = [{"s": "café — ß"}, {"s": "plain"}]
        path = write_columnar(rows, tmp_path / "u.fgc")
        assert ColumnarReader(path).read_column("s") == ["café — ß", "plain"]

    def test_empty_file_has_schema(self, tmp_path):
        path = write_columnar([], tmp_path / "empty.fgc", columns=["a", "b"])
        reader = ColumnarReader(path)
        assert reader.n_rows == 0
        assert reader.column_names == ["a", "b"]
        assert reader.read_column("a") == []


class TestFilter:
    def test_filter_matches_brute_force_json_scan(self, tmp_path):
        rows = [
            {"license_group": g, "idx": i}
            for i, g in enumerate(["commercial", "other", "commercial", "noncommercial", "commercial"])
        ]
        jsonl = tmp_path / "rows.jsonl"
        jsonl.write_text("".join(json.dumps(r) + "\n" for r in rows))
        path = write_columnar(rows, tmp_path / "meta.fgc")

        got = ColumnarReader(path).filter_equals("license_group", "commercial")
        oracle = [
            i for i, line in enumerate(jsonl.read_text().splitlines())
            if json.loads(line)["license_group"] == "commercial"
        ]
        assert got == oracle == [0, 2, 4]

    def test_filter_none_matches_nulls(self, tmp_path):
        rows = [{"x": 1}, {"x": None}, {"x": 3}]
        path = write_columnar(rows, tmp_path / "n.fgc")
        assert ColumnarReader(path).filter_equals("x", None) == [1]


class TestSchema:
    def test_drift_names_field(self, tmp_path):
        rows = [{"a": 1, "b": 2}, {"a": 1, "c": 3}]
        with pytest.raises(SchemaError, match="'b'|'c'"):
            write_columnar(rows, tmp_path / "drift.fgc")

    def test_incompatible_type_mix_names_column(self, tmp_path):
        rows = [{"a": 1}, {"a": "text"}]
        with pytest.raises(SchemaError, match="'a'"):
            write_columnar(rows, tmp_path / "mix.fgc")

    def test_int_float_promote(self, tmp_path):
        rows = [{"a": 1}, {"a": 2.5}]
        path = write_columnar(rows, tmp_path / "p.fgc")
        assert ColumnarReader(path).read_column("a") == [1.0, 2.5]

    def test_unknown_column(self, tmp_path):
        path = write_columnar([{"a": 1}], tmp_path / "x.fgc")
        with pytest.raises(SchemaError):
            ColumnarReader(path).read_column("zzz")

    def test_bad_magic(self, tmp_path):
        bad = tmp_path / "bad.fgc"
        bad.write_bytes(b"NOPE1234")
        with pytest.raises(ParseError):
            ColumnarReader(bad)

from __future__ import annotations

import json
import tarfile

import pytest

from corpus import build_corpus_files, make_jpeg
from figarchive.errors import ExtractionError, ValidationError
from figarchive.jats import parse_article
from figarchive.shards import (
    DEFAULT_KEEP_GLOBALS,
    FigureSample,
    ShardManifest,
    concept_balance,
    concept_filter,
    dedup_samples,
    denormalize,
    sample_key,
    stream_shards,
    write_files,
    write_shards,
)
from figarchive.taxonomy import ClusterAnnotation, resolve_cluster


def make_sample(key: str, primary="microscopy", local="light microscopy", image=b"\xff\xd8img") -> FigureSample:
    return FigureSample(
        sample_key=key,
        image=image,
        caption=f"caption for {key}",
        metadata={
            "image_key": key,
            "image_primary_label": primary,
            "image_primary_local_label": local,
            "image_hash": key,
        },
    )


def parsed_articles(tmp_path):
    articles = []
    for accession, members in build_corpus_files().items():
        art_dir = tmp_path / accession
        art_dir.mkdir()
        nxml = None
        for name, data in members.items():
            rel = name.split("/", 1)[1]
            (art_dir / rel).write_bytes(data)
            if rel.endswith(".nxml"):
                nxml = data
        articles.append(parse_article(nxml, art_dir))
    return articles


def resolved_for(cluster_id=0, global_="microscopy", local="light microscopy"):
    return resolve_cluster([
        ClusterAnnotation("a1", cluster_id, "single", [global_], [local]),
        ClusterAnnotation("a2", cluster_id, "single", [global_], [local]),
    ])


class TestDenormalize:
    def test_one_article_three_figures(self, tmp_path):
        articles = parsed_articles(tmp_path)
        first = [a for a in articles if a.accession_id == "PMC2001"]
        samples = list(denormalize(first, media_root=tmp_path))
        assert len(samples) == 3
        metas = [s.metadata for s in samples]
        article_fields = [
            {k: v for k, v in m.items() if k.startswith("article_")} for m in metas
        ]
        assert article_fields[0] == article_fields[1] == article_fields[2]

    def test_sibling_article_metadata_byte_identical(self, tmp_path):
        articles = parsed_articles(tmp_path)
        samples = list(denormalize(articles, media_root=tmp_path))
        by_article: dict[str, list[bytes]] = {}
        for s in samples:
            blob = json.dumps(
                {k: v for k, v in s.metadata.items() if k.startswith("article_") or k == "image_set"},
                sort_keys=True,
            ).encode()
            by_article.setdefault(s.metadata["article_accession_id"], []).append(blob)
        for blobs in by_article.values():
            assert all(b == blobs[0] for b in blobs)

    def test_stream_order_article_then_figure(self, tmp_path):
        articles = parsed_articles(tmp_path)
        samples = list(denormalize(articles, media_root=tmp_path))
        keys = [s.sample_key for s in samples]
        expected = [
            sample_key(doc.accession_id, fig.image_id)
            for doc in articles
            for fig in doc.figure_set
        ]
        assert keys == expected
        assert len(keys) == 7

    def test_missing_image_skipped_and_counted(self, tmp_path):
        articles = parsed_articles(tmp_path)
        target = articles[0].figure_set[1]
        (tmp_path / articles[0].accession_id / target.image_file).unlink()
        stats = {}
        samples = list(denormalize(articles, media_root=tmp_path, stats=stats))
        assert stats["in"] == 7
        assert stats["out"] == 6
        assert stats["skipped"] == 1
        assert stats["in"] == stats["out"] + stats["skipped"]
        assert all(s.sample_key != sample_key(articles[0].accession_id, target.image_id) for s in samples)

    def test_strict_label_policy(self, tmp_path):
        articles = parsed_articles(tmp_path)
        with pytest.raises(ValidationError, match="no resolved labels"):
            list(denormalize(articles, label_map={}, media_root=tmp_path, missing_label_policy="strict"))

    def test_labels_attached(self, tmp_path):
        articles = parsed_articles(tmp_path)
        key = sample_key("PMC2001", "fig1")
        label_map = {key: resolved_for()}
        assignments = {key: 4}
        samples = list(denormalize(articles, label_map=label_map, assignments=assignments, media_root=tmp_path))
        labeled = next(s for s in samples if s.sample_key == key)
        assert labeled.metadata["image_primary_label"] == "microscopy"
        assert labeled.metadata["image_cluster_id"] == 4
        unlabeled = next(s for s in samples if s.sample_key != key)
        assert unlabeled.metadata["image_primary_label"] == ""


class TestConceptFilter:
    def test_tables_dropped_microscopy_kept(self):
        samples = [make_sample("a", primary="tables"), make_sample("b", primary="microscopy")]
        kept = list(concept_filter(samples))
        assert [s.sample_key for s in kept] == ["b"]

    def test_default_keep_set_excludes_plots_tables_equations(self):
        for excluded in ("tables", "plots and charts", "scientific formulae and equations"):
            assert not list(concept_filter([make_sample("x", primary=excluded)]))
        for kept in ("clinical imaging", "Microscopy", "immuno-assays", "maps"):
            assert list(concept_filter([make_sample("x", primary=kept)]))

    def test_empty_keep_set(self):
        assert list(concept_filter([make_sample("a")], keep_globals=[])) == []

    def test_unlabeled_strict_vs_lenient(self):
        samples = [make_sample("a", primary="")]
        stats = {}
        assert list(concept_filter(iter(samples), strict=False, stats=stats)) == []
        assert stats["unlabeled"] == 1
        with pytest.raises(ValidationError):
            list(concept_filter(iter(samples), strict=True))

    def test_conservation(self):
        samples = [make_sample(f"s{i}", primary="tables" if i % 2 else "maps") for i in range(10)]
        stats = {}
        kept = list(concept_filter(samples, stats=stats))
        assert stats["in"] == stats["out"] + stats["skipped"] == 10
        assert len(kept) == stats["out"]


class TestConceptBalance:
    def test_cap_arithmetic(self):
        samples = [make_sample(f"bar{i}", local="barplot") for i in range(100)]
        samples += [make_sample(f"map{i}", local="map") for i in range(10)]
        kept = concept_balance(samples, cap_per_local=10, seed=0)
        groups = {}
        for s in kept:
            groups.setdefault(s.metadata["image_primary_local_label"], []).append(s)
        assert len(groups["barplot"]) == 10
        assert len(groups["map"]) == 10

    def test_cap_larger_than_groups_is_identity(self):
        samples = [make_sample(f"s{i}", local=f"l{i % 3}") for i in range(9)]
        kept = concept_balance(samples, cap_per_local=100, seed=1)
        assert [s.sample_key for s in kept] == [s.sample_key for s in samples]

    def test_rerun_same_seed_identical(self):
        samples = [make_sample(f"s{i}", local=f"l{i % 4}") for i in range(200)]
        a = [s.sample_key for s in concept_balance(samples, cap_per_local=7, seed=9)]
        b = [s.sample_key for s in concept_balance(samples, cap_per_local=7, seed=9)]
        assert a == b

    def test_different_seed_differs(self):
        samples = [make_sample(f"s{i}", local="one") for i in range(300)]
        a = [s.sample_key for s in concept_balance(samples, cap_per_local=5, seed=1)]
        b = [s.sample_key for s in concept_balance(samples, cap_per_local=5, seed=2)]
        assert a != b

    def test_filter_then_balance_commutes_with_balance_then_filter(self):
        samples = []
        for i in range(60):
            primary = ["microscopy", "tables", "maps"][i % 3]
            local = {"microscopy": "light microscopy", "tables": "table", "maps": "map"}[primary]
            samples.append(make_sample(f"s{i:03d}", primary=primary, local=local))
        cap, seed = 5, 3
        fb = concept_balance(list(concept_filter(samples)), cap_per_local=cap, seed=seed)
        bf = list(concept_filter(concept_balance(samples, cap_per_local=cap, seed=seed)))
        assert [s.sample_key for s in fb] == [s.sample_key for s in bf]


class TestWriteShards:
    def samples(self, n):
        return [make_sample(f"s{i:04d}", image=bytes([i % 251]) * 64) for i in range(n)]

    def test_five_samples_shard_size_two(self, tmp_path):
        manifest = write_shards(self.samples(5), tmp_path, samples_per_shard=2)
        assert [s["sample_count"] for s in manifest.shards] == [2, 2, 1]
        assert manifest.total_samples == 5
        assert [s["path"] for s in manifest.shards] == ["data-000000.tar", "data-000001.tar", "data-000002.tar"]

    def test_member_layout_three_consecutive_per_sample(self, tmp_path):
        write_shards(self.samples(2), tmp_path, samples_per_shard=10)
        with tarfile.open(tmp_path / "data-000000.tar") as tar:
            names = [m.name for m in tar.getmembers()]
        assert names == [
            "s0000.jpg", "s0000.txt", "s0000.json",
            "s0001.jpg", "s0001.txt", "s0001.json",
        ]

    def test_worker_counts_byte_identical(self, tmp_path):
        samples = self.samples(40)
        digests = {}
        for workers in (1, 2, 4, 8):
            out = tmp_path / f"w{workers}"
            manifest = write_shards(samples, out, samples_per_shard=7, workers=workers)
            shard_bytes = b"".join((out / s["path"]).read_bytes() for s in manifest.shards)
            digests[workers] = (json.dumps(manifest.to_dict(), sort_keys=True), shard_bytes)
        assert len({d for d in digests.values()}) == 1

    def test_round_trip_exact(self, tmp_path):
        samples = self.samples(9)
        write_shards(samples, tmp_path, samples_per_shard=4)
        back = list(stream_shards(tmp_path))
        assert len(back) == 9
        for orig, got in zip(samples, back):
            assert got.sample_key == orig.sample_key
            assert got.image == orig.image
            assert got.caption == orig.caption
            assert got.metadata == orig.metadata

    def test_manifest_round_trip(self, tmp_path):
        manifest = write_shards(self.samples(3), tmp_path, samples_per_shard=2, subset_name="full")
        loaded = ShardManifest.load(tmp_path / "manifest.json")
        assert loaded.to_dict() == manifest.to_dict()
        assert sum(s["sample_count"] for s in loaded.shards) == loaded.total_samples


class TestStreamShards:
    def test_resume_at_shard_boundary_exactly_once(self, tmp_path):
        samples = [make_sample(f"s{i:03d}") for i in range(10)]
        manifest = write_shards(samples, tmp_path, samples_per_shard=4)
        first_shard_count = manifest.shards[0]["sample_count"]
        consumed = []
        it = stream_shards(tmp_path)
        for _ in range(first_shard_count):
            consumed.append(next(it).sample_key)
        resumed = [s.sample_key for s in stream_shards(tmp_path, start_shard=1)]
        assert consumed + resumed == [s.sample_key for s in samples]
        assert set(consumed).isdisjoint(resumed)

    def test_truncated_shard_identified(self, tmp_path):
        write_shards([make_sample(f"s{i}") for i in range(6)], tmp_path, samples_per_shard=3)
        shard = tmp_path / "data-000001.tar"
        blob = shard.read_bytes()
        shard.write_bytes(blob[: len(blob) // 2 - 100])
        with pytest.raises(ExtractionError, match="data-000001.tar"):
            list(stream_shards(tmp_path))

    def test_streaming_does_not_materialize(self, tmp_path):
        samples = [make_sample(f"s{i:03d}", image=b"z" * 1000) for i in range(20)]
        write_shards(samples, tmp_path, samples_per_shard=20)
        it = stream_shards(tmp_path)
        first = next(it)
        assert first.sample_key == "s000"
        it.close()


class TestDedup:
    def test_exact_hash_caption_dedup(self):
        a = make_sample("a")
        b = make_sample("b")
        dup = FigureSample(sample_key="a2", image=a.image, caption=a.caption, metadata=dict(a.metadata))
        stats = {}
        kept = list(dedup_samples([a, b, dup], stats=stats))
        assert [s.sample_key for s in kept] == ["a", "b"]
        assert stats == {"in": 3, "out": 2, "skipped": 1}


class TestWriteFiles:
    def test_layout(self, tmp_path):
        keys = write_files([make_sample("k1"), make_sample("k2")], tmp_path)
        assert keys == ["k1", "k2"]
        assert (tmp_path / "k1.jpg").exists()
        assert (tmp_path / "k2.txt").read_text() == "caption for k2"
        assert json.loads((tmp_path / "k1.json").read_text())["image_key"] == "k1"

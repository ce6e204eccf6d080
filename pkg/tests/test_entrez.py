from __future__ import annotations

from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from figarchive.entrez import (
    MockMetadataService,
    batch_pmids,
    enrich_pmids,
    fetch_enrichment,
    parse_service_response,
)
from figarchive.errors import FetchError, ParseError, TransientTransportError
from figarchive.ingest import DownloadPolicy


class TestBatchPmids:
    def test_450_ids_split_200_200_50(self):
        batches = batch_pmids(list(range(450)), 200)
        assert [len(b) for b in batches] == [200, 200, 50]

    def test_empty_input(self):
        assert batch_pmids([], 200) == []

    def test_exactly_200_is_one_batch(self):
        assert [len(b) for b in batch_pmids(list(range(200)), 200)] == [200]

    @given(st.lists(st.integers(min_value=1, max_value=10**7), max_size=300),
           st.integers(min_value=1, max_value=50))
    def test_concatenation_round_trips_and_sizes_hold(self, ids, size):
        batches = batch_pmids(ids, size)
        assert [x for b in batches for x in b] == ids
        assert all(len(b) <= size for b in batches)
        assert all(len(b) == size for b in batches[:-1])


class TestFetchEnrichment:
    def table(self):
        return {
            101: (["Humans", "Mice"], [5, 6, 7]),
            102: (["Humans"], []),
            103: (["Humans", "Humans", "Brain"], [9]),  # dup term collapses
        }

    def test_known_pmids_populated(self):
        svc = MockMetadataService(self.table())
        records = fetch_enrichment([101, 102], svc)
        assert [r.pmid for r in records] == [101, 102]
        assert records[0].mesh_terms == ["Humans", "Mice"]
        assert records[0].citing_pmids == [5, 6, 7]
        assert records[0].citing_count == 3

    def test_unknown_pmid_yields_empty_record(self):
        svc = MockMetadataService(self.table())
        records = fetch_enrichment([101, 999], svc)
        unknown = records[1]
        assert unknown.pmid == 999
        assert unknown.mesh_terms == [] and unknown.citing_pmids == []
        assert unknown.citing_count == 0

    def test_mesh_frequency_aggregate(self):
        # frequency-count oracle over the mock fixture
        svc = MockMetadataService(self.table())
        records = fetch_enrichment([101, 102, 103], svc)
        freq = Counter(t for r in records for t in r.mesh_terms)
        assert freq["Humans"] == 3

    def test_duplicate_terms_deduplicated_order_preserved(self):
        svc = MockMetadataService(self.table())
        (rec,) = fetch_enrichment([103], svc)
        assert rec.mesh_terms == ["Humans", "Brain"]

    def test_transport_failure_retried(self):
        class Flaky:
            def __init__(self, inner, fails):
                self.inner, self.fails, self.calls = inner, fails, 0

            def fetch_metadata(self, pmids):
                self.calls += 1
                if self.calls <= self.fails:
                    raise TransientTransportError("down")
                return self.inner.fetch_metadata(pmids)

        svc = Flaky(MockMetadataService(self.table()), fails=2)
        policy = DownloadPolicy(max_retries=3, retry_base_delay=0.01)
        records = fetch_enrichment([101], svc, policy=policy)
        assert records[0].mesh_terms == ["Humans", "Mice"]
        assert svc.calls == 3

    def test_exhausted_retries(self):
        class Dead:
            def fetch_metadata(self, pmids):
                raise TransientTransportError("down")

        with pytest.raises(FetchError):
            fetch_enrichment([1], Dead(), policy=DownloadPolicy(max_retries=1, retry_base_delay=0.01))

    def test_malformed_response_names_batch(self):
        with pytest.raises(ParseError, match=r"\[1, 2\]"):
            parse_service_response(b"<ArticleSet><unclosed>", [1, 2])


class TestEnrichPmids:
    def test_merge_over_batches_equals_single_fetch(self):
        table = {i: ([f"T{i}"], [i * 10]) for i in range(1, 8)}
        ids = list(range(1, 8))
        merged = enrich_pmids(ids, MockMetadataService(table), batch_size=3)
        single = {
            r.pmid: r for r in fetch_enrichment(ids, MockMetadataService(table))
        }
        assert set(merged) == set(single)
        for pmid in ids:
            assert merged[pmid].mesh_terms == single[pmid].mesh_terms
            assert merged[pmid].citing_pmids == single[pmid].citing_pmids

    def test_no_oversized_request_issued(self):
        svc = MockMetadataService({})
        enrich_pmids(list(range(25)), svc, batch_size=10)
        assert all(len(call) <= 10 for call in svc.calls)
        assert [len(c) for c in svc.calls] == [10, 10, 5]

"""Batched enrichment client: MeSH terms and citing-article ids per article.

The metadata service is abstracted behind a tiny client interface returning
XML in the documented ``<ArticleSet>`` format (see docs/formats.md); the
production backend speaks HTTP, tests use an in-process mock.  Ids unknown to
the service are not errors: they yield empty term/citation lists.
"""

from __future__ import annotations

import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from .errors import ParseError, TransientTransportError
from .ingest import DownloadPolicy
from .ratelimit import SlidingWindowLimiter, retry_call

logger = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 200


@dataclass
class EnrichmentRecord:
    pmid: int
    mesh_terms: list[str] = field(default_factory=list)
    citing_pmids: list[int] = field(default_factory=list)

    @property
    def citing_count(self) -> int:
        return len(self.citing_pmids)


class MetadataService(Protocol):
    def fetch_metadata(self, pmids: Sequence[int]) -> bytes: ...


class HttpMetadataService:
    """GETs ``{base_url}?id=1,2,3`` and returns the response body."""

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url
        self.timeout = timeout

    def fetch_metadata(self, pmids: Sequence[int]) -> bytes:
        import requests

        try:
            resp = requests.get(
                self.base_url,
                params={"id": ",".join(str(p) for p in pmids)},
                timeout=self.timeout,
            )
            resp.raise_for_status()
            return resp.content
        except requests.RequestException as exc:
            raise TransientTransportError(str(exc)) from exc


class MockMetadataService:
    """In-process service over a pmid -> (mesh_terms, citing_pmids) table."""

    def __init__(self, table: dict[int, tuple[list[str], list[int]]]):
        self.table = dict(table)
        self.calls: list[list[int]] = []

    def fetch_metadata(self, pmids: Sequence[int]) -> bytes:
        self.calls.append(list(pmids))
        articles = []
        for pmid in pmids:
            if pmid not in self.table:
                continue
            mesh, citing = self.table[pmid]
            mesh_xml = "".join(f"<Term>{t}</Term>" for t in mesh)
            citing_xml = "".join(f"<PMID>{c}</PMID>" for c in citing)
            articles.append(
                f"<Article><PMID>{pmid}</PMID><MeshTerms>{mesh_xml}</MeshTerms>"
                f"<CitingPmids>{citing_xml}</CitingPmids></Article>"
            )
        return f"<ArticleSet>{''.join(articles)}</ArticleSet>".encode()


def batch_pmids(pmids: Sequence[int], batch_size: int = DEFAULT_BATCH_SIZE) -> list[list[int]]:
    """Split ids into order-preserving batches of at most ``batch_size``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [list(pmids[i : i + batch_size]) for i in range(0, len(pmids), batch_size)]


def parse_service_response(xml_bytes: bytes, batch: Sequence[int]) -> dict[int, EnrichmentRecord]:
    try:
        root = ET.fromstring(xml_bytes)
    except ET.ParseError as exc:
        raise ParseError(f"malformed service response for batch {list(batch)}: {exc}") from exc
    found: dict[int, EnrichmentRecord] = {}
    for article in root.iter("Article"):
        pmid_el = article.find("PMID")
        if pmid_el is None or not (pmid_el.text or "").strip().isdigit():
            continue
        pmid = int(pmid_el.text.strip())
        mesh: list[str] = []
        seen: set[str] = set()
        for term in article.findall("./MeshTerms/Term"):
            text = (term.text or "").strip()
            if text and text not in seen:
                seen.add(text)
                mesh.append(text)
        citing = [
            int(el.text.strip())
            for el in article.findall("./CitingPmids/PMID")
            if (el.text or "").strip().isdigit()
        ]
        found[pmid] = EnrichmentRecord(pmid=pmid, mesh_terms=mesh, citing_pmids=citing)
    return found


def fetch_enrichment(
    batch: Sequence[int],
    service: MetadataService,
    policy: DownloadPolicy | None = None,
    limiter: SlidingWindowLimiter | None = None,
) -> list[EnrichmentRecord]:
    """Fetch one batch; returns one record per requested pmid, in batch order.

    Transport failures are retried under the same policy as package
    downloads; unknown pmids come back with empty lists.
    """
    if len(batch) > DEFAULT_BATCH_SIZE and policy is None:
        logger.warning("batch of %d exceeds the default service limit", len(batch))
    policy = policy or DownloadPolicy()

    def attempt() -> bytes:
        if limiter is not None:
            limiter.acquire()
        return service.fetch_metadata(batch)

    xml_bytes, attempts = retry_call(
        attempt,
        max_retries=policy.max_retries,
        base_delay=policy.retry_base_delay,
        retriable=(TransientTransportError,),
    )
    logger.info("metadata batch of %d fetched in %d attempt(s)", len(batch), attempts)
    found = parse_service_response(xml_bytes, batch)
    return [found.get(pmid, EnrichmentRecord(pmid=pmid)) for pmid in batch]


def enrich_pmids(
    pmids: Sequence[int],
    service: MetadataService,
    batch_size: int = DEFAULT_BATCH_SIZE,
    policy: DownloadPolicy | None = None,
) -> dict[int, EnrichmentRecord]:
    """Batch, fetch, and merge records keyed by pmid."""
    limiter = SlidingWindowLimiter((policy or DownloadPolicy()).max_requests_per_second)
    merged: dict[int, EnrichmentRecord] = {}
    for batch in batch_pmids(pmids, batch_size):
        for record in fetch_enrichment(batch, service, policy=policy, limiter=limiter):
            merged[record.pmid] = record
    return merged

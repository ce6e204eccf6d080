"""Tools for turning an open-access article mirror into an annotated,
shard-serialized image-caption archive.

Subpackage map:

- ``ingest``: file-list parsing, rate-limited package download, archive extraction
- ``jats``: nXML article parsing, figure captions/mentions, license grouping
- ``entrez``: batched article-metadata enrichment (MeSH terms, citing ids)
- ``store``: capped JSONL persistence and corpus statistics
- ``embedding`` / ``cluster``: pluggable image embeddings, PCA, k-means
- ``taxonomy`` / ``annotation_service``: concept taxonomy, cluster annotation,
  majority-vote resolution, label propagation
- ``shards`` / ``columnar``: figure-level tar shards, streaming readback,
  columnar metadata sidecar
- ``evaluation``: zero-shot classification/retrieval metrics, bootstrap CIs,
  parameter interpolation
- ``pipeline``: staged, resumable orchestration
"""

__version__ = "0.1.0"

"""Figure-level denormalization, subset construction, tar-shard serialization
following the consecutive-member convention, and streaming readback.

Each sample occupies three consecutive tar members named ``{key}.jpg``,
``{key}.txt`` (caption), ``{key}.json`` (full metadata), so a sequential
reader reconstructs samples without any index.  Shard writing pre-partitions
the sample stream into shard-sized blocks before dispatching to workers, so
shard boundaries and bytes are identical for any worker count.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import tarfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np

from .errors import ExtractionError, ValidationError
from .jats import ArticleDoc, FigureRecord
from .taxonomy import ResolvedClusterLabels, normalize_label

logger = logging.getLogger(__name__)

SHARD_PATTERN = "data-%06d.tar"
MANIFEST_NAME = "manifest.json"

# global concepts kept by default when filtering: everything except tables,
# plots/charts, and scientific formulae / equations
DEFAULT_KEEP_GLOBALS = frozenset({
    "clinicalimaging",
    "microscopy",
    "immunoassays",
    "illustrativediagrams",
    "chemicalstructures",
    "maps",
    "toolsandmaterials",
    "handdrawnandscreenbasedvisuals",
})


@dataclass
class FigureSample:
    sample_key: str
    image: bytes
    caption: str
    metadata: dict[str, Any]


@dataclass
class ShardManifest:
    shards: list[dict]  # {"path", "sample_count", "byte_size"}
    total_samples: int
    subset_name: str = ""
    filter_spec: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "shards": self.shards,
            "total_samples": self.total_samples,
            "subset_name": self.subset_name,
            "filter_spec": self.filter_spec,
        }

    @staticmethod
    def from_dict(data: dict) -> "ShardManifest":
        return ShardManifest(
            shards=list(data["shards"]),
            total_samples=data["total_samples"],
            subset_name=data.get("subset_name", ""),
            filter_spec=data.get("filter_spec"),
        )

    def save(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @staticmethod
    def load(path: str | Path) -> "ShardManifest":
        return ShardManifest.from_dict(json.loads(Path(path).read_text()))


def sample_key(accession_id: str, image_id: str) -> str:
    return f"{accession_id}_{image_id}"


def build_sample_metadata(
    doc: ArticleDoc,
    fig: FigureRecord,
    labels: Optional[ResolvedClusterLabels],
    cluster_id: Optional[int],
) -> dict[str, Any]:
    """The denormalized per-figure metadata object (schema in docs/schema.md);
    article-level values repeat verbatim across an article's figures."""
    panel = labels.panel_type if labels else ""
    return {
        "image_key": sample_key(doc.accession_id, fig.image_id),
        "image_file": fig.image_file,
        "image_file_name": fig.image_id,
        "caption": fig.caption,
        "image_context": list(fig.mentions),
        "image_set": [f.image_id for f in doc.figure_set],
        "image_hash": fig.image_hash,
        "image_width": fig.width,
        "image_height": fig.height,
        "image_cluster_id": cluster_id,
        "image_panel_type": panel,
        "image_panel_subtype": panel.removeprefix("multi_") if panel.startswith("multi_") else "",
        "image_primary_label": labels.primary_global if labels else "",
        "image_secondary_label": list(labels.secondary_globals) if labels else [],
        "image_primary_local_label": labels.primary_local if labels else "",
        "image_secondary_local_labels": list(labels.secondary_locals) if labels else [],
        "image_needs_review": labels.needs_review if labels else False,
        "article_accession_id": doc.accession_id,
        "article_pmid": doc.pmid,
        "article_title": doc.title,
        "article_abstract": doc.abstract,
        "article_keywords": list(doc.keywords),
        "article_category": doc.category,
        "article_full_text": doc.full_text,
        "article_date": doc.date,
        "article_journal": doc.journal,
        "article_citation": doc.citation,
        "article_license": doc.license_raw,
        "article_license_group": doc.license_group,
        "article_mesh_terms": list(doc.mesh_terms),
        "article_citing_pmids": list(doc.citing_pmids),
        "article_citing_count": doc.citing_count,
        "article_nxml": doc.nxml,
    }


def denormalize(
    articles: Iterable[ArticleDoc],
    label_map: Optional[Mapping[str, ResolvedClusterLabels]] = None,
    assignments: Optional[Mapping[str, int]] = None,
    media_root: str | Path = ".",
    missing_label_policy: str = "empty",
    stats: Optional[dict] = None,
) -> Iterator[FigureSample]:
    """One sample per figure, in article order then figure order.

    ``label_map``/``assignments`` are keyed by sample key.  A figure whose
    image file is missing on disk is skipped and logged.  With
    ``missing_label_policy="strict"`` an unlabeled figure is an error;
    the default passes it through with empty labels.
    """
    if missing_label_policy not in ("empty", "strict"):
        raise ValidationError("missing_label_policy must be 'empty' or 'strict'")
    media_root = Path(media_root)
    counters = {"in": 0, "out": 0, "skipped": 0}
    try:
        for doc in articles:
            for fig in doc.figure_set:
                counters["in"] += 1
                key = sample_key(doc.accession_id, fig.image_id)
                image_path = media_root / doc.accession_id / fig.image_file
                if fig.file_missing or not fig.image_file or not image_path.is_file():
                    counters["skipped"] += 1
                    logger.warning("skipping %s: image file missing (%s)", key, image_path)
                    continue
                labels = (label_map or {}).get(key)
                if labels is None and missing_label_policy == "strict":
                    raise ValidationError(f"no resolved labels for sample {key}")
                cluster_id = (assignments or {}).get(key)
                counters["out"] += 1
                yield FigureSample(
                    sample_key=key,
                    image=image_path.read_bytes(),
                    caption=fig.caption,
                    metadata=build_sample_metadata(doc, fig, labels, cluster_id),
                )
    finally:
        logger.info(
            "denormalize: %d in, %d out, %d skipped",
            counters["in"], counters["out"], counters["skipped"],
        )
        if stats is not None:
            stats.update(counters)


def concept_filter(
    samples: Iterable[FigureSample],
    keep_globals: Optional[Iterable[str]] = None,
    strict: bool = False,
    stats: Optional[dict] = None,
) -> Iterator[FigureSample]:
    """Keep samples whose primary global concept is in the keep set.

    The keep set is compared on normalized labels and defaults to
    DEFAULT_KEEP_GLOBALS.  Unlabeled samples are an error in strict mode and
    are dropped (counted) otherwise.
    """
    keep = frozenset(
        normalize_label(g) for g in (keep_globals if keep_globals is not None else DEFAULT_KEEP_GLOBALS)
    )
    counters = {"in": 0, "out": 0, "skipped": 0, "unlabeled": 0}
    try:
        for sample in samples:
            counters["in"] += 1
            label = normalize_label(sample.metadata.get("image_primary_label") or "")
            if not label:
                if strict:
                    raise ValidationError(f"sample {sample.sample_key} has no primary global label")
                counters["unlabeled"] += 1
                counters["skipped"] += 1
                continue
            if label in keep:
                counters["out"] += 1
                yield sample
            else:
                counters["skipped"] += 1
    finally:
        logger.info(
            "concept_filter: %d in, %d out, %d dropped (%d unlabeled)",
            counters["in"], counters["out"], counters["skipped"], counters["unlabeled"],
        )
        if stats is not None:
            stats.update(counters)


def _group_rng(seed: int, group: str) -> np.random.Generator:
    digest = hashlib.sha256(group.encode("utf-8")).digest()
    return np.random.default_rng(np.random.SeedSequence([seed, int.from_bytes(digest[:8], "little")]))


def concept_balance(
    samples: Iterable[FigureSample],
    cap_per_local: int,
    seed: int,
    stats: Optional[dict] = None,
) -> list[FigureSample]:
    """Cap each normalized primary-local concept at ``cap_per_local`` samples
    via per-group reservoir sampling; deterministic given the seed.

    Materializes the stream (reservoir selection needs the full pass); kept
    samples come back in their original order.
    """
    if cap_per_local < 1:
        raise ValidationError("cap_per_local must be >= 1")
    buffered = list(samples)
    reservoirs: dict[str, list[int]] = {}
    seen: dict[str, int] = {}
    rngs: dict[str, np.random.Generator] = {}
    for idx, sample in enumerate(buffered):
        group = normalize_label(sample.metadata.get("image_primary_local_label") or "")
        if group not in reservoirs:
            reservoirs[group] = []
            seen[group] = 0
            rngs[group] = _group_rng(seed, group)
        count = seen[group]
        reservoir = reservoirs[group]
        if count < cap_per_local:
            reservoir.append(idx)
        else:
            j = int(rngs[group].integers(0, count + 1))
            if j < cap_per_local:
                reservoir[j] = idx
        seen[group] = count + 1
    kept = sorted(i for reservoir in reservoirs.values() for i in reservoir)
    if stats is not None:
        stats.update({"in": len(buffered), "out": len(kept), "skipped": len(buffered) - len(kept)})
    logger.info("concept_balance: %d in, %d out", len(buffered), len(kept))
    return [buffered[i] for i in kept]


def dedup_samples(samples: Iterable[FigureSample], stats: Optional[dict] = None) -> Iterator[FigureSample]:
    """Optional pre-pass dropping exact (image_hash, caption) duplicates."""
    seen: set[tuple[str, str]] = set()
    counters = {"in": 0, "out": 0, "skipped": 0}
    for sample in samples:
        counters["in"] += 1
        key = (sample.metadata.get("image_hash", ""), sample.caption)
        if key in seen:
            counters["skipped"] += 1
            continue
        seen.add(key)
        counters["out"] += 1
        yield sample
    if stats is not None:
        stats.update(counters)


def _tar_member(name: str, data: bytes) -> tarfile.TarInfo:
    info = tarfile.TarInfo(name=name)
    info.size = len(data)
    info.mtime = 0
    info.mode = 0o644
    info.uid = info.gid = 0
    info.uname = info.gname = ""
    return info


def _write_one_shard(shard_path: Path, block: Sequence[FigureSample]) -> dict:
    try:
        with tarfile.open(shard_path, "w", format=tarfile.USTAR_FORMAT) as tar:
            for sample in block:
                payload = json.dumps(sample.metadata, ensure_ascii=False, sort_keys=True).encode("utf-8")
                caption = sample.caption.encode("utf-8")
                tar.addfile(_tar_member(f"{sample.sample_key}.jpg", sample.image), io.BytesIO(sample.image))
                tar.addfile(_tar_member(f"{sample.sample_key}.txt", caption), io.BytesIO(caption))
                tar.addfile(_tar_member(f"{sample.sample_key}.json", payload), io.BytesIO(payload))
    except BaseException:
        shard_path.unlink(missing_ok=True)
        raise
    return {
        "path": shard_path.name,
        "sample_count": len(block),
        "byte_size": shard_path.stat().st_size,
    }


def write_shards(
    samples: Iterable[FigureSample],
    out_dir: str | Path,
    samples_per_shard: int,
    workers: int = 1,
    subset_name: str = "",
    filter_spec: Optional[dict] = None,
) -> ShardManifest:
    """Serialize the stream into ``data-%06d.tar`` shards; returns the manifest.

    The stream is pre-partitioned into shard-sized blocks before any worker
    runs, so output is identical for any worker count.  A failed shard write
    removes its partial file and aborts.
    """
    if samples_per_shard < 1:
        raise ValidationError("samples_per_shard must be >= 1")
    if workers < 1:
        raise ValidationError("workers must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    blocks: list[list[FigureSample]] = []
    current: list[FigureSample] = []
    for sample in samples:
        current.append(sample)
        if len(current) == samples_per_shard:
            blocks.append(current)
            current = []
    if current:
        blocks.append(current)

    jobs = [(out_dir / (SHARD_PATTERN % i), block) for i, block in enumerate(blocks)]
    if workers == 1:
        shard_infos = [_write_one_shard(path, block) for path, block in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            shard_infos = list(pool.map(lambda job: _write_one_shard(*job), jobs))

    manifest = ShardManifest(
        shards=shard_infos,
        total_samples=sum(info["sample_count"] for info in shard_infos),
        subset_name=subset_name,
        filter_spec=filter_spec,
    )
    manifest.save(out_dir)
    logger.info("wrote %d shard(s), %d samples", len(shard_infos), manifest.total_samples)
    return manifest


ByteSource = Callable[[str | Path], io.BufferedIOBase]


def _local_byte_source(path: str | Path) -> io.BufferedIOBase:
    return open(path, "rb")


def stream_shards(
    manifest: ShardManifest | str | Path,
    shard_dir: Optional[str | Path] = None,
    start_shard: int = 0,
    byte_source: ByteSource = _local_byte_source,
) -> Iterator[FigureSample]:
    """Stream samples back in shard order without materializing a shard.

    ``manifest`` may be a ShardManifest, a manifest path, or a directory
    containing one.  ``start_shard`` resumes at a shard boundary.  A
    truncated shard raises :class:`ExtractionError` naming the shard and the
    failing member index.
    """
    if isinstance(manifest, (str, Path)):
        manifest_path = Path(manifest)
        if manifest_path.is_dir():
            manifest_path = manifest_path / MANIFEST_NAME
        base_dir = manifest_path.parent
        manifest = ShardManifest.load(manifest_path)
    else:
        base_dir = Path(shard_dir) if shard_dir is not None else Path(".")

    for shard_index, info in enumerate(manifest.shards):
        if shard_index < start_shard:
            continue
        shard_path = base_dir / info["path"]
        pending: dict[str, Any] = {}
        member_index = -1
        try:
            with byte_source(shard_path) as fh:
                with tarfile.open(fileobj=fh, mode="r|") as tar:
                    for member in tar:
                        member_index += 1
                        if not member.isfile():
                            continue
                        stem, _, ext = member.name.rpartition(".")
                        if pending and pending.get("key") != stem:
                            raise ExtractionError(
                                f"{shard_path}: interleaved members near index {member_index}"
                            )
                        extracted = tar.extractfile(member)
                        if extracted is None:
                            continue
                        data = extracted.read()
                        pending.setdefault("key", stem)
                        pending[ext] = data
                        if {"jpg", "txt", "json"} <= set(pending):
                            yield FigureSample(
                                sample_key=pending["key"],
                                image=pending["jpg"],
                                caption=pending["txt"].decode("utf-8"),
                                metadata=json.loads(pending["json"]),
                            )
                            pending = {}
        except tarfile.TarError as exc:
            raise ExtractionError(
                f"truncated or corrupt shard {shard_path} at member {member_index + 1}: {exc}"
            ) from exc
        if pending:
            raise ExtractionError(
                f"truncated shard {shard_path}: incomplete sample {pending.get('key')!r}"
            )


def write_files(samples: Iterable[FigureSample], out_dir: str | Path) -> list[str]:
    """Per-sample files layout (the random-access counterpart of shards)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    keys: list[str] = []
    for sample in samples:
        (out_dir / f"{sample.sample_key}.jpg").write_bytes(sample.image)
        (out_dir / f"{sample.sample_key}.txt").write_text(sample.caption, encoding="utf-8")
        (out_dir / f"{sample.sample_key}.json").write_text(
            json.dumps(sample.metadata, ensure_ascii=False, sort_keys=True), encoding="utf-8"
        )
        keys.append(sample.sample_key)
    return keys


def benchmark_io(
    manifest: ShardManifest | str | Path,
    files_dir: str | Path,
    seed: int = 0,
    shard_dir: Optional[str | Path] = None,
) -> dict:
    """Measure sequential shard streaming vs random per-file access.

    Returns per-mode samples/s and MB/s plus the sequential/random throughput
    ratio.  The same corpus must exist in both layouts.
    """
    files_dir = Path(files_dir)

    start = time.perf_counter()
    seq_samples = 0
    seq_bytes = 0
    keys: list[str] = []
    for sample in stream_shards(manifest, shard_dir=shard_dir):
        seq_samples += 1
        seq_bytes += len(sample.image) + len(sample.caption.encode())
        keys.append(sample.sample_key)
    seq_seconds = time.perf_counter() - start

    order = list(keys)
    np.random.default_rng(seed).shuffle(order)
    start = time.perf_counter()
    rand_samples = 0
    rand_bytes = 0
    for key in order:
        image = (files_dir / f"{key}.jpg").read_bytes()
        caption = (files_dir / f"{key}.txt").read_bytes()
        json.loads((files_dir / f"{key}.json").read_text(encoding="utf-8"))
        rand_samples += 1
        rand_bytes += len(image) + len(caption)
    rand_seconds = time.perf_counter() - start

    def mode_report(n: int, nbytes: int, seconds: float) -> dict:
        return {
            "samples": n,
            "seconds": seconds,
            "samples_per_s": n / seconds if seconds > 0 else float("inf"),
            "mb_per_s": nbytes / 1e6 / seconds if seconds > 0 else float("inf"),
        }

    sequential = mode_report(seq_samples, seq_bytes, seq_seconds)
    random_mode = mode_report(rand_samples, rand_bytes, rand_seconds)
    ratio = (
        sequential["samples_per_s"] / random_mode["samples_per_s"]
        if random_mode["samples_per_s"] > 0
        else float("inf")
    )
    return {"sequential_shards": sequential, "random_files": random_mode, "ratio": ratio}

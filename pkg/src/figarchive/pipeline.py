"""Staged, resumable orchestration of the full archive build.

Stages run in a fixed order; each writes a completion marker carrying hashes
of its inputs and outputs.  A rerun skips stages whose input hash is
unchanged; a stage whose prerequisite outputs were mutated on disk after the
prerequisite's marker was written fails with a stale-input error instead of
silently consuming them.  Config grammar is documented in
docs/pipeline_config.md (JSON, or TOML when a TOML parser is available).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from . import store
from .cluster import (
    fit_pca,
    kmeans,
    load_assignments,
    project,
    sample_members,
    save_assignments,
    save_centroids,
    save_pca_model,
)
from .columnar import write_columnar
from .embedding import (
    EmbeddingMatrix,
    ExternalProcessBackend,
    HashEmbeddingBackend,
    embed_images,
    load_embeddings,
    save_embeddings,
)
from .entrez import HttpMetadataService, MockMetadataService, enrich_pmids
from .errors import FigArchiveError, ValidationError
from .evaluation import TaskSpec, evaluate_classification
from .ingest import DownloadPolicy, FtpTransport, LocalDirTransport, ingest_entries, parse_file_list
from .jats import apply_file_list_entry, parse_article
from .shards import (
    concept_balance,
    concept_filter,
    dedup_samples,
    denormalize,
    sample_key,
    write_shards,
)
from .taxonomy import (
    export_review_queue,
    load_taxonomy,
    read_annotation_log,
    read_resolved_jsonl,
    resolve_all,
    write_resolved_jsonl,
)

logger = logging.getLogger(__name__)

STAGE_ORDER = (
    "ingest", "extract", "enrich", "store", "embed",
    "cluster", "annotate-export", "resolve", "serialize", "eval",
)

PREREQUISITES: dict[str, tuple[str, ...]] = {
    "ingest": (),
    "extract": ("ingest",),
    "enrich": ("extract",),
    "store": ("extract",),
    "embed": ("extract",),
    "cluster": ("embed",),
    "annotate-export": ("cluster",),
    "resolve": (),
    "serialize": ("extract", "cluster", "resolve"),
    "eval": (),
}


class StaleInputError(FigArchiveError):
    """A prerequisite's recorded outputs no longer match what is on disk."""


@dataclass
class PipelineConfig:
    workspace: Path
    raw: dict[str, Any]
    config_dir: Path

    def section(self, name: str) -> dict[str, Any]:
        return dict(self.raw.get(name.replace("-", "_"), {}) or {})

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else (self.config_dir / p)

    def seed(self, stage: str, key: str = "seed") -> int:
        section = self.section(stage)
        if key in section:
            return int(section[key])
        seeds = self.raw.get("seeds", {})
        name = stage.replace("-", "_")
        if name in seeds:
            return int(seeds[name])
        raise ValidationError(f"no explicit seed for stage {stage!r}; add seeds.{name}")

    # stage output directories
    @property
    def ingest_dir(self) -> Path:
        return self.workspace / "ingest"

    @property
    def articles_dir(self) -> Path:
        return self.workspace / "articles"

    @property
    def embeddings_dir(self) -> Path:
        return self.workspace / "embeddings"

    @property
    def clusters_dir(self) -> Path:
        return self.workspace / "clusters"

    @property
    def annotate_dir(self) -> Path:
        return self.workspace / "annotate"

    @property
    def labels_dir(self) -> Path:
        return self.workspace / "labels"

    @property
    def shards_dir(self) -> Path:
        return self.workspace / "shards"

    @property
    def eval_dir(self) -> Path:
        return self.workspace / "eval"


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    text = path.read_bytes()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib  # Python >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        raw = tomllib.loads(text.decode("utf-8"))
    else:
        raw = json.loads(text)
    if "workspace" not in raw:
        raise ValidationError("config must declare a workspace path")
    config_dir = path.parent.resolve()
    workspace = Path(raw["workspace"])
    if not workspace.is_absolute():
        workspace = config_dir / workspace
    return PipelineConfig(workspace=workspace, raw=raw, config_dir=config_dir)


def validate_config(config: PipelineConfig, stages: Sequence[str]) -> None:
    """Fail fast, before any stage runs: paths declared and present, seeds
    explicit for every randomized stage requested."""
    for stage in stages:
        if stage not in STAGE_ORDER:
            raise ValidationError(f"unknown stage {stage!r}")
    if "ingest" in stages:
        section = config.section("ingest")
        if "file_list" not in section:
            raise ValidationError("ingest.file_list is required")
        if not config.path(section["file_list"]).is_file():
            raise ValidationError(f"ingest.file_list not found: {section['file_list']}")
        transport = section.get("transport", {})
        if transport.get("type") not in ("local", "ftp"):
            raise ValidationError("ingest.transport.type must be 'local' or 'ftp'")
        if transport["type"] == "local" and not config.path(transport["root"]).is_dir():
            raise ValidationError(f"ingest.transport.root not found: {transport['root']}")
    if "enrich" in stages:
        service = config.section("enrich").get("service", {})
        if service.get("type") not in ("canned", "http"):
            raise ValidationError("enrich.service.type must be 'canned' or 'http'")
        if service["type"] == "canned" and not config.path(service["path"]).is_file():
            raise ValidationError(f"enrich.service.path not found: {service['path']}")
        if service["type"] == "http" and not os.environ.get(service.get("url_env", "")):
            raise ValidationError("enrich.service.url_env names an unset environment variable")
    if "cluster" in stages:
        config.seed("cluster")
        if "k" not in config.section("cluster"):
            raise ValidationError("cluster.k is required")
    if "annotate-export" in stages:
        config.seed("annotate-export")
    if "resolve" in stages:
        section = config.section("resolve")
        if "annotations" not in section:
            raise ValidationError("resolve.annotations is required")
        if not config.path(section["annotations"]).is_file():
            raise ValidationError(f"resolve.annotations not found: {section['annotations']}")
    if "serialize" in stages:
        section = config.section("serialize")
        if "samples_per_shard" not in section:
            raise ValidationError("serialize.samples_per_shard is required")
        if section.get("balance"):
            config.seed("serialize", key="balance_seed")
    if "eval" in stages:
        section = config.section("eval")
        for key in ("task", "image_embeddings", "text_embeddings"):
            if key not in section:
                raise ValidationError(f"eval.{key} is required")
            if not config.path(section[key]).exists():
                raise ValidationError(f"eval.{key} not found: {section[key]}")
        config.seed("eval", key="shuffle_seed")


def _hash_paths(paths: Sequence[Path]) -> str:
    digest = hashlib.sha256()
    files: list[Path] = []
    for path in paths:
        if path.is_dir():
            files.extend(p for p in sorted(path.rglob("*")) if p.is_file())
        elif path.is_file():
            files.append(path)
    root = os.path.commonpath([str(f.parent) for f in files]) if files else ""
    for f in sorted(files):
        digest.update(os.path.relpath(str(f), root).encode())
        digest.update(hashlib.sha256(f.read_bytes()).digest())
    return digest.hexdigest()


def _hash_config(section: dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(section, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class Stage:
    name: str
    inputs: Callable[[PipelineConfig], list[Path]]
    outputs: Callable[[PipelineConfig], list[Path]]
    run: Callable[[PipelineConfig], None]
    # stages whose outputs this stage rewrites in place (their marker's
    # output hash is refreshed afterwards so the mutation is not "stale")
    mutates: tuple[str, ...] = ()


def _marker_path(config: PipelineConfig, stage: str) -> Path:
    return config.workspace / ".markers" / f"{stage}.json"


def _write_marker(config: PipelineConfig, stage: Stage) -> None:
    marker = _marker_path(config, stage.name)
    marker.parent.mkdir(parents=True, exist_ok=True)
    marker.write_text(json.dumps({
        "stage": stage.name,
        "input_hash": _hash_paths(stage.inputs(config)) + ":" + _hash_config(config.section(stage.name)),
        "output_hash": _hash_paths(stage.outputs(config)),
        "completed_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }))


# ---------------------------------------------------------------- stage bodies

def _run_ingest(config: PipelineConfig) -> None:
    section = config.section("ingest")
    file_list_path = config.path(section["file_list"])
    entries = parse_file_list(file_list_path.read_bytes())
    transport_cfg = section.get("transport", {})
    if transport_cfg["type"] == "local":
        transport = LocalDirTransport(config.path(transport_cfg["root"]))
    else:
        transport = FtpTransport(
            host=os.environ.get(transport_cfg.get("host_env", ""), transport_cfg.get("host", "")),
        )
    policy = DownloadPolicy(
        max_requests_per_second=float(section.get("rate", 3.0)),
        max_retries=int(section.get("retries", 5)),
        retry_base_delay=float(section.get("retry_base_delay", 0.5)),
        keep_extensions=frozenset(section.get("keep", ["nxml", "jpg"])),
    )
    records = ingest_entries(
        entries, policy, transport, config.ingest_dir,
        max_workers=int(section.get("workers", 4)),
        log_path=config.ingest_dir / "ingest_log.jsonl",
    )
    shutil.copyfile(file_list_path, config.ingest_dir / "file_list.csv")
    failed = [r for r in records if r.status == "failed"]
    if failed:
        raise FigArchiveError(f"{len(failed)} package(s) failed to ingest: {failed[0].error}")


def _load_entries(config: PipelineConfig) -> dict[str, Any]:
    entries = parse_file_list((config.ingest_dir / "file_list.csv").read_bytes())
    return {e.accession_id: e for e in entries}


def _run_extract(config: PipelineConfig) -> None:
    media_root = config.ingest_dir / "media"
    by_accession = _load_entries(config)
    articles = []
    for art_dir in sorted(p for p in media_root.iterdir() if p.is_dir()):
        nxmls = sorted(art_dir.glob("*.nxml"))
        if not nxmls:
            logger.warning("no nXML under %s; skipping", art_dir)
            continue
        doc = parse_article(nxmls[0].read_bytes(), art_dir)
        doc.nxml = str(nxmls[0].relative_to(media_root))
        entry = by_accession.get(art_dir.name)
        if entry is not None:
            apply_file_list_entry(doc, entry)
        articles.append(doc)
    max_per_file = int(config.section("extract").get("max_per_file", store.DEFAULT_MAX_PER_FILE))
    store.write_article_jsonl(articles, config.articles_dir, max_per_file=max_per_file)


def _run_enrich(config: PipelineConfig) -> None:
    section = config.section("enrich")
    service_cfg = section["service"]
    if service_cfg["type"] == "canned":
        table_raw = json.loads(config.path(service_cfg["path"]).read_text())
        table = {
            int(pmid): (list(rec.get("mesh_terms", [])), [int(c) for c in rec.get("citing_pmids", [])])
            for pmid, rec in table_raw.items()
        }
        service: Any = MockMetadataService(table)
    else:
        service = HttpMetadataService(os.environ[service_cfg["url_env"]])
    articles = list(store.read_article_jsonl(config.articles_dir))
    pmids = [a.pmid for a in articles if a.pmid is not None]
    records = enrich_pmids(pmids, service, batch_size=int(section.get("batch_size", 200)))
    for doc in articles:
        if doc.pmid is not None and doc.pmid in records:
            rec = records[doc.pmid]
            doc.mesh_terms = list(rec.mesh_terms)
            doc.citing_pmids = list(rec.citing_pmids)
            doc.citing_count = rec.citing_count
    # rewrite in place via a temp directory + atomic swap of file contents
    tmp_dir = config.articles_dir.parent / (config.articles_dir.name + ".tmp")
    if tmp_dir.exists():
        shutil.rmtree(tmp_dir)
    max_per_file = int(config.section("extract").get("max_per_file", store.DEFAULT_MAX_PER_FILE))
    store.write_article_jsonl(articles, tmp_dir, max_per_file=max_per_file)
    for tmp_file in sorted(tmp_dir.glob("articles-*.jsonl")):
        os.replace(tmp_file, config.articles_dir / tmp_file.name)
    shutil.rmtree(tmp_dir)


def _run_store(config: PipelineConfig) -> None:
    articles = store.read_article_jsonl(config.articles_dir)
    stats = store.compute_stats(articles)
    (config.workspace / "stats.json").write_text(json.dumps(stats.to_dict(), indent=2))


def _iter_corpus_images(config: PipelineConfig):
    media_root = config.ingest_dir / "media"
    for doc in store.read_article_jsonl(config.articles_dir):
        for fig in doc.figure_set:
            if fig.file_missing or not fig.image_file:
                continue
            path = media_root / doc.accession_id / fig.image_file
            if path.is_file():
                yield sample_key(doc.accession_id, fig.image_id), path.read_bytes()


def _run_embed(config: PipelineConfig) -> None:
    backend_cfg = config.section("embed").get("backend", {"type": "hash", "dim": 64})
    if backend_cfg["type"] == "hash":
        backend: Any = HashEmbeddingBackend(dim=int(backend_cfg.get("dim", 64)))
    elif backend_cfg["type"] == "external":
        backend = ExternalProcessBackend(backend_cfg["command"], dim=int(backend_cfg["dim"]))
    else:
        raise ValidationError(f"unknown embed backend type {backend_cfg['type']!r}")
    matrix, skipped = embed_images(_iter_corpus_images(config), backend)
    save_embeddings(matrix, config.embeddings_dir, "images")
    (config.embeddings_dir / "skipped.json").write_text(json.dumps(skipped))
    if skipped:
        logger.warning("embedding skipped %d image(s)", len(skipped))


def _run_cluster(config: PipelineConfig) -> None:
    section = config.section("cluster")
    matrix = load_embeddings(config.embeddings_dir / "images.json")
    pca = fit_pca(
        matrix,
        variance_target=float(section.get("variance_target", 0.99)),
        max_components=section.get("max_components", 25),
    )
    reduced = project(pca, matrix)
    model = kmeans(reduced, K=int(section["k"]), seed=config.seed("cluster"))
    save_pca_model(pca, config.clusters_dir)
    save_centroids(model, config.clusters_dir)
    save_assignments(model.assignments, config.clusters_dir / "assignments.csv")


def _run_annotate_export(config: PipelineConfig) -> None:
    section = config.section("annotate-export")
    assignments = load_assignments(config.clusters_dir / "assignments.csv")
    n = int(section.get("samples_per_cluster", 30))
    seed = config.seed("annotate-export")
    montage = {
        str(cid): sample_members(assignments, cid, n=n, seed=seed + cid)
        for cid in sorted(set(assignments.values()))
    }
    config.annotate_dir.mkdir(parents=True, exist_ok=True)
    (config.annotate_dir / "montage.json").write_text(json.dumps(montage, indent=2))


def _run_resolve(config: PipelineConfig) -> None:
    section = config.section("resolve")
    annotations = read_annotation_log(config.path(section["annotations"]))
    taxonomy = load_taxonomy(config.path(section["taxonomy"]) if "taxonomy" in section else None)
    resolved = resolve_all(annotations, taxonomy=taxonomy)
    write_resolved_jsonl(resolved, config.labels_dir / "resolved.jsonl")
    export_review_queue(resolved, config.labels_dir / "review.csv")


def _run_serialize(config: PipelineConfig) -> None:
    section = config.section("serialize")
    use_labels = bool(section.get("use_labels", True))
    label_map = None
    assignments = None
    if use_labels:
        assignments = load_assignments(config.clusters_dir / "assignments.csv")
        resolved = read_resolved_jsonl(config.labels_dir / "resolved.jsonl")
        from .taxonomy import propagate

        label_map = propagate(resolved, assignments)
    articles = store.read_article_jsonl(config.articles_dir)
    samples = denormalize(
        articles,
        label_map=label_map,
        assignments=assignments,
        media_root=config.ingest_dir / "media",
        missing_label_policy=str(section.get("missing_label_policy", "empty")),
    )
    filter_spec: Optional[dict] = None
    if section.get("dedup"):
        samples = dedup_samples(samples)
    if section.get("filter") is not None:
        filter_cfg = section["filter"] or {}
        keep = filter_cfg.get("keep_globals")
        samples = concept_filter(samples, keep_globals=keep, strict=bool(filter_cfg.get("strict", False)))
        filter_spec = {"filter": {"keep_globals": sorted(keep) if keep else "default"}}
    if section.get("balance") is not None:
        balance_cfg = section["balance"]
        samples = concept_balance(
            samples,
            cap_per_local=int(balance_cfg["cap_per_local"]),
            seed=config.seed("serialize", key="balance_seed"),
        )
        filter_spec = dict(filter_spec or {})
        filter_spec["balance"] = {"cap_per_local": int(balance_cfg["cap_per_local"])}
    materialized = list(samples)
    write_shards(
        materialized,
        config.shards_dir,
        samples_per_shard=int(section["samples_per_shard"]),
        workers=int(section.get("workers", 1)),
        subset_name=str(section.get("subset_name", "full")),
        filter_spec=filter_spec,
    )
    write_columnar([s.metadata for s in materialized], config.shards_dir / "metadata.fgc")


def _run_eval(config: PipelineConfig) -> None:
    section = config.section("eval")
    task = TaskSpec.load(config.path(section["task"]))
    image_embeddings = load_embeddings(config.path(section["image_embeddings"]))
    text_embeddings = load_embeddings(config.path(section["text_embeddings"]))
    report = evaluate_classification(
        task,
        image_embeddings,
        text_embeddings,
        shuffle_seed=config.seed("eval", key="shuffle_seed"),
        bootstrap_resamples=int(section.get("bootstrap", 1000)),
        bootstrap_seed=int(config.section("eval").get("bootstrap_seed", 0)),
    )
    config.eval_dir.mkdir(parents=True, exist_ok=True)
    (config.eval_dir / "results.json").write_text(json.dumps(report, indent=2))


def _stage_table() -> dict[str, Stage]:
    return {
        "ingest": Stage(
            "ingest",
            inputs=lambda c: [c.path(c.section("ingest").get("file_list", ""))],
            outputs=lambda c: [c.ingest_dir],
            run=_run_ingest,
        ),
        "extract": Stage(
            "extract",
            inputs=lambda c: [c.ingest_dir],
            outputs=lambda c: [c.articles_dir],
            run=_run_extract,
        ),
        "enrich": Stage(
            "enrich",
            inputs=lambda c: [c.articles_dir] + (
                [c.path(c.section("enrich")["service"]["path"])]
                if c.section("enrich").get("service", {}).get("type") == "canned" else []
            ),
            outputs=lambda c: [c.articles_dir],
            run=_run_enrich,
            mutates=("extract",),
        ),
        "store": Stage(
            "store",
            inputs=lambda c: [c.articles_dir],
            outputs=lambda c: [c.workspace / "stats.json"],
            run=_run_store,
        ),
        "embed": Stage(
            "embed",
            inputs=lambda c: [c.articles_dir],
            outputs=lambda c: [c.embeddings_dir],
            run=_run_embed,
        ),
        "cluster": Stage(
            "cluster",
            inputs=lambda c: [c.embeddings_dir],
            outputs=lambda c: [c.clusters_dir],
            run=_run_cluster,
        ),
        "annotate-export": Stage(
            "annotate-export",
            inputs=lambda c: [c.clusters_dir],
            outputs=lambda c: [c.annotate_dir],
            run=_run_annotate_export,
        ),
        "resolve": Stage(
            "resolve",
            inputs=lambda c: [c.path(c.section("resolve").get("annotations", ""))],
            outputs=lambda c: [c.labels_dir],
            run=_run_resolve,
        ),
        "serialize": Stage(
            "serialize",
            inputs=lambda c: [c.articles_dir, c.clusters_dir, c.labels_dir],
            outputs=lambda c: [c.shards_dir],
            run=_run_serialize,
        ),
        "eval": Stage(
            "eval",
            inputs=lambda c: [
                c.path(c.section("eval").get("task", "")),
                c.path(c.section("eval").get("image_embeddings", "")),
                c.path(c.section("eval").get("text_embeddings", "")),
            ],
            outputs=lambda c: [c.eval_dir],
            run=_run_eval,
        ),
    }


@dataclass
class StageReport:
    name: str
    status: str  # ok | skipped | failed
    seconds: float = 0.0
    error: Optional[str] = None


@dataclass
class RunReport:
    stages: list[StageReport] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(s.status in ("ok", "skipped") for s in self.stages)

    def to_dict(self) -> dict:
        return {"stages": [dataclasses.asdict(s) for s in self.stages], "ok": self.ok}


def _serialize_prereqs(config: PipelineConfig) -> tuple[str, ...]:
    if config.section("serialize").get("use_labels", True):
        return PREREQUISITES["serialize"]
    return ("extract",)


def run(config: PipelineConfig, stages: Optional[Sequence[str]] = None) -> RunReport:
    """Run the requested stages in canonical order with marker-based skips."""
    requested = list(stages) if stages else [s for s in STAGE_ORDER if s.replace("-", "_") in config.raw]
    requested = [s for s in STAGE_ORDER if s in requested]
    if not requested:
        raise ValidationError("no stages requested")
    validate_config(config, requested)
    config.workspace.mkdir(parents=True, exist_ok=True)

    table = _stage_table()
    report = RunReport()
    completed_this_run: set[str] = set()

    for name in requested:
        stage = table[name]
        prereqs = _serialize_prereqs(config) if name == "serialize" else PREREQUISITES[name]
        for prereq in prereqs:
            if prereq in completed_this_run:
                continue
            marker = _marker_path(config, prereq)
            if not marker.exists():
                raise ValidationError(f"stage {name!r} requires stage {prereq!r} to have run first")
            recorded = json.loads(marker.read_text())
            current = _hash_paths(table[prereq].outputs(config))
            if current != recorded["output_hash"]:
                raise StaleInputError(
                    f"outputs of prerequisite stage {prereq!r} changed since its marker was written"
                )

        marker = _marker_path(config, name)
        input_hash = _hash_paths(stage.inputs(config)) + ":" + _hash_config(config.section(name))
        if marker.exists():
            recorded = json.loads(marker.read_text())
            if recorded.get("input_hash") == input_hash and _hash_paths(stage.outputs(config)) == recorded.get("output_hash"):
                report.stages.append(StageReport(name=name, status="skipped"))
                completed_this_run.add(name)
                logger.info("stage %s: skipped (marker matches)", name)
                continue

        start = time.perf_counter()
        try:
            stage.run(config)
        except Exception as exc:
            report.stages.append(StageReport(
                name=name, status="failed",
                seconds=time.perf_counter() - start, error=str(exc),
            ))
            logger.error("stage %s failed: %s", name, exc)
            return report
        _write_marker(config, stage)
        for mutated in stage.mutates:
            mutated_marker = _marker_path(config, mutated)
            if mutated_marker.exists():
                recorded = json.loads(mutated_marker.read_text())
                recorded["output_hash"] = _hash_paths(table[mutated].outputs(config))
                mutated_marker.write_text(json.dumps(recorded))
        report.stages.append(StageReport(name=name, status="ok", seconds=time.perf_counter() - start))
        completed_this_run.add(name)
        logger.info("stage %s: ok (%.2fs)", name, report.stages[-1].seconds)
    return report

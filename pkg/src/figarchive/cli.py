"""Command-line entry points over the library stages.

Subcommands: ingest, extract, enrich, stats, serialize, stream, eval,
pipeline, annotate-serve.  ``pipeline run`` exits 0 on success, 2 on
validation errors, 3 on a stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pipeline_mod
from . import store
from .cluster import load_assignments
from .entrez import HttpMetadataService, enrich_pmids
from .errors import FigArchiveError, ValidationError
from .evaluation import RetrievalSet, TaskSpec, evaluate_classification, evaluate_retrieval
from .embedding import load_embeddings
from .ingest import DownloadPolicy, FtpTransport, LocalDirTransport, ingest_entries, parse_file_list
from .jats import apply_file_list_entry, parse_article
from .shards import (
    ShardManifest,
    benchmark_io,
    concept_balance,
    concept_filter,
    denormalize,
    stream_shards,
    write_shards,
)
from .columnar import write_columnar
from .taxonomy import propagate, read_resolved_jsonl

logger = logging.getLogger(__name__)


def _cmd_ingest(args: argparse.Namespace) -> int:
    entries = parse_file_list(Path(args.file_list).read_bytes())
    policy = DownloadPolicy(
        max_requests_per_second=args.rate,
        max_retries=args.retries,
        keep_extensions=frozenset(args.keep.split(",")),
    )
    if args.transport_root:
        transport = LocalDirTransport(args.transport_root)
    elif args.ftp_host:
        transport = FtpTransport(args.ftp_host)
    else:
        print("error: one of --transport-root or --ftp-host is required", file=sys.stderr)
        return 2
    out = Path(args.out)
    records = ingest_entries(
        entries, policy, transport, out,
        max_workers=args.workers, log_path=out / "ingest_log.jsonl",
    )
    import shutil

    shutil.copyfile(args.file_list, out / "file_list.csv")
    failed = sum(1 for r in records if r.status == "failed")
    print(f"ingested {len(records)} package(s), {failed} failed; log at {out / 'ingest_log.jsonl'}")
    return 0 if failed == 0 else 1


def _cmd_extract(args: argparse.Namespace) -> int:
    in_dir = Path(args.in_dir)
    media_root = in_dir / "media" if (in_dir / "media").is_dir() else in_dir
    file_list = in_dir / "file_list.csv"
    by_accession = {}
    if file_list.is_file():
        by_accession = {e.accession_id: e for e in parse_file_list(file_list.read_bytes())}
    articles = []
    for art_dir in sorted(p for p in media_root.iterdir() if p.is_dir()):
        nxmls = sorted(art_dir.glob("*.nxml"))
        if not nxmls:
            continue
        doc = parse_article(nxmls[0].read_bytes(), art_dir)
        doc.nxml = str(nxmls[0].relative_to(media_root))
        if art_dir.name in by_accession:
            apply_file_list_entry(doc, by_accession[art_dir.name])
        articles.append(doc)
    paths = store.write_article_jsonl(articles, args.out, max_per_file=args.max_per_file)
    print(f"wrote {len(articles)} article(s) to {len(paths)} file(s) under {args.out}")
    return 0


def _cmd_enrich(args: argparse.Namespace) -> int:
    articles = list(store.read_article_jsonl(args.in_dir))
    pmids = [a.pmid for a in articles if a.pmid is not None]
    service = HttpMetadataService(args.service_url)
    records = enrich_pmids(pmids, service, batch_size=args.batch_size)
    for doc in articles:
        if doc.pmid in records:
            rec = records[doc.pmid]
            doc.mesh_terms = list(rec.mesh_terms)
            doc.citing_pmids = list(rec.citing_pmids)
            doc.citing_count = rec.citing_count
    import os
    import shutil

    in_dir = Path(args.in_dir)
    tmp_dir = in_dir.parent / (in_dir.name + ".tmp")
    if tmp_dir.exists():
        shutil.rmtree(tmp_dir)
    store.write_article_jsonl(articles, tmp_dir, max_per_file=args.max_per_file)
    for tmp_file in sorted(tmp_dir.glob("articles-*.jsonl")):
        os.replace(tmp_file, in_dir / tmp_file.name)
    shutil.rmtree(tmp_dir)
    print(f"enriched {len(pmids)} article(s) in place under {in_dir}")
    return 0


def _cmd_stats(args: argparse.Namespace) -> int:
    stats = store.compute_stats(store.read_article_jsonl(args.in_dir))
    Path(args.out).write_text(json.dumps(stats.to_dict(), indent=2))
    print(f"stats for {stats.articles_total} article(s) -> {args.out}")
    return 0


def _cmd_serialize(args: argparse.Namespace) -> int:
    label_map = None
    assignments = None
    if args.labels:
        resolved = read_resolved_jsonl(args.labels)
        assignments = load_assignments(args.assignments) if args.assignments else {}
        label_map = propagate(resolved, assignments)
    samples = denormalize(
        store.read_article_jsonl(args.in_dir),
        label_map=label_map,
        assignments=assignments,
        media_root=args.media_root,
    )
    filter_spec = None
    if args.filter:
        keep = json.loads(Path(args.filter).read_text())
        samples = concept_filter(samples, keep_globals=keep)
        filter_spec = {"filter": {"keep_globals": sorted(keep)}}
    if args.balance_cap:
        samples = concept_balance(samples, cap_per_local=args.balance_cap, seed=args.seed)
        filter_spec = dict(filter_spec or {})
        filter_spec["balance"] = {"cap_per_local": args.balance_cap}
    materialized = list(samples)
    manifest = write_shards(
        materialized, args.out,
        samples_per_shard=args.shard_size,
        workers=args.workers,
        filter_spec=filter_spec,
    )
    write_columnar([s.metadata for s in materialized], Path(args.out) / "metadata.fgc")
    print(f"wrote {manifest.total_samples} sample(s) across {len(manifest.shards)} shard(s)")
    return 0


def _cmd_stream(args: argparse.Namespace) -> int:
    if args.benchmark:
        if not args.files_dir:
            print("error: --benchmark requires --files-dir", file=sys.stderr)
            return 2
        report = benchmark_io(args.manifest, args.files_dir, seed=args.seed)
        print(json.dumps(report, indent=2))
        print(f"sequential/random throughput ratio: {report['ratio']:.2f}x")
        return 0
    count = 0
    for sample in stream_shards(args.manifest):
        count += 1
        if args.show_keys:
            print(sample.sample_key)
    print(f"streamed {count} sample(s)")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    if args.mode == "classify":
        task = TaskSpec.load(args.task)
        image_embeddings = load_embeddings(args.embeddings[0])
        text_embeddings = load_embeddings(args.embeddings[1])
        report = evaluate_classification(
            task, image_embeddings, text_embeddings,
            shuffle_seed=args.seed, bootstrap_resamples=args.bootstrap, bootstrap_seed=args.seed,
        )
    else:
        images = load_embeddings(args.embeddings[0])
        captions = load_embeddings(args.embeddings[1])
        report = evaluate_retrieval(
            RetrievalSet(image_embeddings=images.values, caption_embeddings=captions.values),
            ks=tuple(args.recall_at),
            bootstrap_resamples=args.bootstrap,
            bootstrap_seed=args.seed,
        )
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _cmd_pipeline(args: argparse.Namespace) -> int:
    try:
        config = pipeline_mod.load_config(args.config)
        stages = args.stages.split(",") if args.stages else None
        report = pipeline_mod.run(config, stages=stages)
    except (ValidationError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except pipeline_mod.StaleInputError as exc:
        print(f"stale input: {exc}", file=sys.stderr)
        return 2
    for stage in report.stages:
        line = f"{stage.name}: {stage.status}"
        if stage.status == "ok":
            line += f" ({stage.seconds:.2f}s)"
        if stage.error:
            line += f" -- {stage.error}"
        print(line)
    return 0 if report.ok else 3


def _cmd_annotate_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .annotation_service import ServiceState, create_app

    assignments = load_assignments(args.assignments)
    montage = {int(k): v for k, v in json.loads(Path(args.montage).read_text()).items()}
    media_paths: dict[str, Path] = {}
    if args.media_map:
        media_paths = {k: Path(v) for k, v in json.loads(Path(args.media_map).read_text()).items()}
    state = ServiceState(
        assignments=assignments,
        samples=montage,
        log_path=Path(args.log),
        media_paths=media_paths,
    )
    uvicorn.run(create_app(state), host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="figarchive")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="download + extract article packages")
    p.add_argument("--file-list", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rate", type=float, default=3.0)
    p.add_argument("--retries", type=int, default=5)
    p.add_argument("--keep", default="nxml,jpg")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--transport-root", help="serve packages from a local mirror directory")
    p.add_argument("--ftp-host", help="FTP host for the production mirror")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("extract", help="parse nXML into article JSONL")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-per-file", type=int, default=store.DEFAULT_MAX_PER_FILE)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("enrich", help="add MeSH terms + citing ids from a metadata service")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--service-url", required=True)
    p.add_argument("--batch-size", type=int, default=200)
    p.add_argument("--max-per-file", type=int, default=store.DEFAULT_MAX_PER_FILE)
    p.set_defaults(func=_cmd_enrich)

    p = sub.add_parser("stats", help="compute corpus statistics")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", default="stats.json")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("serialize", help="write figure-level tar shards")
    p.add_argument("--in", dest="in_dir", required=True, help="article JSONL directory")
    p.add_argument("--media-root", required=True)
    p.add_argument("--labels", help="resolved cluster labels JSONL")
    p.add_argument("--assignments", help="image-key,cluster-id CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--shard-size", type=int, default=10000)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--filter", help="JSON file with a list of global concepts to keep")
    p.add_argument("--balance-cap", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_serialize)

    p = sub.add_parser("stream", help="stream shards back (optionally benchmark)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--benchmark", action="store_true")
    p.add_argument("--files-dir", help="per-sample files layout for the random-access mode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--show-keys", action="store_true")
    p.set_defaults(func=_cmd_stream)

    p = sub.add_parser("eval", help="zero-shot classification / retrieval evaluation")
    p.add_argument("mode", choices=["classify", "retrieve"])
    p.add_argument("--embeddings", nargs=2, required=True,
                   metavar=("IMAGE_HEADER", "TEXT_HEADER"),
                   help="embedding header JSONs (image, text/caption)")
    p.add_argument("--task", help="task spec JSON (classify mode)")
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--recall-at", type=int, nargs="+", default=[1, 10, 100])
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("pipeline", help="run staged pipeline from a config file")
    run_sub = p.add_subparsers(dest="pipeline_command", required=True)
    p_run = run_sub.add_parser("run")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--stages", help="comma-separated subset, canonical order enforced")
    p_run.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("annotate-serve", help="serve the cluster annotation HTTP API")
    p.add_argument("--assignments", required=True)
    p.add_argument("--montage", required=True, help="cluster-id -> sampled image keys JSON")
    p.add_argument("--log", required=True, help="append-only annotation JSONL")
    p.add_argument("--media-map", help="image-key -> file path JSON for thumbnails")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8100)
    p.set_defaults(func=_cmd_annotate_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "eval" and args.mode == "classify" and not args.task:
        print("error: eval classify requires --task", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except FigArchiveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

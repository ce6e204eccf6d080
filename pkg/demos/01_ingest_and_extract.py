"""Walkthrough: mirror ingestion and article extraction.

Builds a two-article mirror in a temp directory (packages + file list),
ingests it through the rate-limited downloader, parses the nXML, and prints
the parsed structure plus corpus statistics.

Run:  python demos/01_ingest_and_extract.py
"""

from __future__ import annotations

import io
import json
import tarfile
import tempfile
from pathlib import Path

from PIL import Image

from figarchive.ingest import DownloadPolicy, LocalDirTransport, ingest_entries, parse_file_list
from figarchive.jats import apply_file_list_entry, parse_article
from figarchive.store import compute_stats, write_article_jsonl

NXML = """<?xml version="1.0"?>
<article xmlns:xlink="http://www.w3.org/1999/xlink">
  <front><article-meta>
    <title-group><article-title>{title}</article-title></title-group>
    <abstract><p>{abstract}</p></abstract>
    <kwd-group><kwd>demo</kwd></kwd-group>
    <pub-date><day>1</day><month>2</month><year>2022</year></pub-date>
  </article-meta></front>
  <body>
    <sec><p>The result appears in <xref ref-type="fig" rid="F1">Figure 1</xref>.</p></sec>
    <fig id="F1"><caption><p>{caption}</p></caption><graphic xlink:href="fig1.jpg"/></fig>
  </body>
</article>
"""


def jpeg(color) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", (20, 20), color).save(buf, format="JPEG")
    return buf.getvalue()


def targz(members: dict[str, bytes]) -> bytes:
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w:gz") as tar:
        for name, data in members.items():
            info = tarfile.TarInfo(name)
            info.size = len(data)
            tar.addfile(info, io.BytesIO(data))
    return buf.getvalue()


def build_mirror(root: Path) -> Path:
    articles = {
        "PMC1": ("First demo article", "An abstract about imaging.", "A bright scan.", (200, 40, 40), "CC BY"),
        "PMC2": ("Second demo article", "An abstract about charts.", "A bar chart.", (40, 40, 200), "CC BY-NC"),
    }
    rows = []
    for i, (acc, (title, abstract, caption, color, license_)) in enumerate(articles.items()):
        pkg = targz({
            f"{acc}/article.nxml": NXML.format(title=title, abstract=abstract, caption=caption).encode(),
            f"{acc}/fig1.jpg": jpeg(color),
            f"{acc}/ignored.pdf": b"%PDF",
        })
        remote_path = f"oa_package/{i:02d}/{acc}.tar.gz"
        target = root / remote_path
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(pkg)
        rows.append(f"{remote_path},{acc} citation,{acc},2022-02-01,{100 + i},{license_}")
    file_list = root / "file_list.csv"
    file_list.write_text("File,Citation,Accession_ID,Date,PMID,License\n" + "\n".join(rows) + "\n")
    return file_list


def main() -> None:
    root = Path(tempfile.mkdtemp(prefix="figarchive-demo-"))
    print(f"workspace: {root}\n")

    file_list = build_mirror(root / "remote")
    entries = parse_file_list(file_list.read_bytes())
    print(f"file list: {len(entries)} entries, first = {entries[0].file_path}")

    policy = DownloadPolicy(max_requests_per_second=10)
    transport = LocalDirTransport(root / "remote")
    records = ingest_entries(entries, policy, transport, root / "ingest",
                             log_path=root / "ingest/ingest_log.jsonl")
    for record in records:
        print(f"  {record.accession_id}: {record.status} ({record.bytes} bytes, {record.attempts} attempt(s))")
    print("note: the .pdf member was discarded; only nxml/jpg are kept\n")

    articles = []
    by_accession = {e.accession_id: e for e in entries}
    for art_dir in sorted((root / "ingest/media").iterdir()):
        doc = parse_article(next(art_dir.glob("*.nxml")).read_bytes(), art_dir)
        apply_file_list_entry(doc, by_accession[art_dir.name])
        articles.append(doc)
        fig = doc.figure_set[0]
        print(f"{doc.accession_id}: '{doc.title}' [{doc.license_group}]")
        print(f"  figure {fig.image_id}: caption={fig.caption!r}")
        print(f"  mentions: {fig.mentions}")

    write_article_jsonl(articles, root / "articles")
    stats = compute_stats(articles)
    print("\ncorpus stats:")
    print(json.dumps({
        "articles_total": stats.articles_total,
        "pair_count": stats.pair_count,
        "caption_token_length": stats.caption_token_length.__dict__,
    }, indent=2))


if __name__ == "__main__":
    main()

"""Article nXML parsing: structured text fields, figure captions, figure
mentions, and license grouping.

Figures are matched to media by the ``xlink:href`` of their ``<graphic>``
element (compared with extensions stripped on both sides); body paragraphs
that cite a figure through ``<xref ref-type="fig">`` become that figure's
mention list.  The fig element's own ``id`` is the mention key and may differ
from the graphic href, so both are stored.
"""

from __future__ import annotations

import hashlib
import re
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ParseError
from .ingest import FileListEntry

XLINK_HREF = "{http://www.w3.org/1999/xlink}href"

COMMERCIAL_LICENSES = {"CC0", "CCBY", "CCBYSA", "CCBYND"}
NONCOMMERCIAL_LICENSES = {"CCBYNC", "CCBYNCSA", "CCBYNCND"}

MEDIA_EXTENSIONS = (".jpg", ".jpeg", ".png", ".gif", ".tif", ".tiff")


class AmbiguousFigureWarning(UserWarning):
    """Two figures reference the same image id; document order wins."""


@dataclass
class FigureRecord:
    image_id: str
    image_file: str
    caption: str
    mentions: list[str] = field(default_factory=list)
    image_hash: str = ""
    fig_rid: str = ""
    width: Optional[int] = None
    height: Optional[int] = None
    file_missing: bool = False


@dataclass
class ArticleDoc:
    accession_id: str
    title: str = ""
    abstract: str = ""
    keywords: list[str] = field(default_factory=list)
    category: Optional[str] = None
    full_text: str = ""
    license_raw: str = ""
    license_group: str = "other"
    figure_set: list[FigureRecord] = field(default_factory=list)
    pmid: Optional[int] = None
    date: str = ""
    journal: str = ""
    citation: str = ""
    nxml: str = ""
    mesh_terms: list[str] = field(default_factory=list)
    citing_pmids: list[int] = field(default_factory=list)
    citing_count: int = 0


def plain_text(elem: Optional[ET.Element]) -> str:
    """Flatten an element to text: tags dropped, nodes joined by single
    spaces, runs of whitespace collapsed."""
    if elem is None:
        return ""
    parts = [t for t in elem.itertext()]
    return re.sub(r"\s+", " ", " ".join(parts)).strip()


def _strip_ext(name: str) -> str:
    stem = name.rsplit("/", 1)[-1]
    if "." in stem:
        stem = stem.rsplit(".", 1)[0]
    return stem


def _graphic_href(fig: ET.Element) -> Optional[str]:
    for graphic in fig.iter():
        if graphic.tag in ("graphic", "inline-graphic"):
            href = graphic.get(XLINK_HREF) or graphic.get("href")
            if href:
                return href
    return None


def parse_xml(nxml_bytes: bytes) -> ET.Element:
    """Parse nXML bytes; malformed input raises ParseError with the byte offset."""
    try:
        return ET.fromstring(nxml_bytes)
    except ET.ParseError as exc:
        line, col = exc.position
        offset = sum(len(ln) + 1 for ln in nxml_bytes.split(b"\n")[: line - 1]) + col
        raise ParseError(f"malformed XML at line {line}, column {col} (byte offset {offset})") from exc


def match_caption(doc_tree: ET.Element, image_id: str) -> str:
    """Caption text of the fig whose graphic href matches ``image_id``.

    Both sides are compared with any extension stripped; no match yields "".
    Multiple matching figs emit :class:`AmbiguousFigureWarning` and the first
    in document order wins.
    """
    want = _strip_ext(image_id)
    matches: list[ET.Element] = []
    for fig in doc_tree.iter("fig"):
        href = _graphic_href(fig)
        if href is not None and _strip_ext(href) == want:
            matches.append(fig)
    if not matches:
        return ""
    if len(matches) > 1:
        warnings.warn(
            f"{len(matches)} figures reference image id {image_id!r}; using first",
            AmbiguousFigureWarning,
        )
    return plain_text(matches[0].find("caption"))


def extract_mentions(doc_tree: ET.Element, fig_rid: str) -> list[str]:
    """Plain text of every paragraph citing ``fig_rid`` via a fig xref.

    An xref's ``rid`` may hold several space-separated ids.  Paragraphs are
    returned in document order; a paragraph citing the figure more than once
    appears once.
    """
    mentions: list[str] = []
    for para in doc_tree.iter("p"):
        cited = False
        for xref in para.iter("xref"):
            if xref.get("ref-type") != "fig":
                continue
            rids = (xref.get("rid") or "").split()
            if fig_rid in rids:
                cited = True
                break
        if cited:
            mentions.append(plain_text(para))
    return mentions


def normalize_license_token(raw: str) -> str:
    return re.sub(r"[^A-Z0-9]", "", raw.upper())


def classify_license(license_raw: str) -> str:
    """Group a raw license string into commercial / noncommercial / other.

    Total and stable under casing, whitespace, and dash variations; anything
    not a recognized Creative Commons form (including empty) is "other".
    """
    token = normalize_license_token(license_raw)
    if token in COMMERCIAL_LICENSES:
        return "commercial"
    if token in NONCOMMERCIAL_LICENSES:
        return "noncommercial"
    return "other"


def _image_dimensions(path: Path) -> tuple[Optional[int], Optional[int]]:
    try:
        from PIL import Image

        with Image.open(path) as img:
            return img.width, img.height
    except Exception:
        return None, None


def _find_media_file(media_dir: Path, image_id: str) -> Optional[Path]:
    stem = _strip_ext(image_id)
    direct = media_dir / image_id
    if direct.is_file():
        return direct
    for ext in MEDIA_EXTENSIONS:
        cand = media_dir / f"{stem}{ext}"
        if cand.is_file():
            return cand
    return None


def _date_from_meta(root: ET.Element) -> str:
    for pub_date in root.iter("pub-date"):
        year = plain_text(pub_date.find("year"))
        if not year:
            continue
        month = plain_text(pub_date.find("month")) or "1"
        day = plain_text(pub_date.find("day")) or "1"
        return f"{int(year):04d}-{int(month):02d}-{int(day):02d}"
    return ""


def parse_article(nxml_bytes: bytes, media_dir: str | Path) -> ArticleDoc:
    """Parse one article's nXML against its media directory.

    Every graphic-bearing fig becomes a FigureRecord with its caption and
    mention paragraphs; images on disk that no fig references are kept as
    records with an empty caption.  A graphic whose media file is absent is
    kept with ``file_missing=True`` (warning logged).
    """
    media_dir = Path(media_dir)
    root = parse_xml(nxml_bytes)

    title = plain_text(root.find(".//article-meta/title-group/article-title"))
    if not title:
        title = plain_text(root.find(".//article-title"))
    abstract = plain_text(root.find(".//article-meta/abstract"))
    keywords = [plain_text(k) for k in root.findall(".//kwd-group/kwd")]
    keywords = [k for k in keywords if k]
    category_el = root.find(".//article-categories//subject")
    category = plain_text(category_el) if category_el is not None else None
    journal = plain_text(root.find(".//journal-meta//journal-title"))
    body = root.find("body")
    full_text = plain_text(body)
    license_raw = plain_text(root.find(".//permissions/license"))

    pmid: Optional[int] = None
    for aid in root.iter("article-id"):
        if aid.get("pub-id-type") == "pmid":
            text = plain_text(aid)
            if text.isdigit():
                pmid = int(text)
            break

    figures: list[FigureRecord] = []
    seen_ids: set[str] = set()
    for fig in root.iter("fig"):
        href = _graphic_href(fig)
        if href is None:
            continue
        image_id = _strip_ext(href)
        if image_id in seen_ids:
            warnings.warn(
                f"duplicate figure image id {image_id!r}; keeping first occurrence",
                AmbiguousFigureWarning,
            )
            continue
        seen_ids.add(image_id)
        fig_rid = fig.get("id") or image_id
        caption = plain_text(fig.find("caption"))
        mentions = extract_mentions(root, fig_rid)
        media_file = _find_media_file(media_dir, href)
        if media_file is None:
            warnings.warn(f"media file for {href!r} not found under {media_dir}", UserWarning)
            figures.append(
                FigureRecord(
                    image_id=image_id,
                    image_file="",
                    caption=caption,
                    mentions=mentions,
                    fig_rid=fig_rid,
                    file_missing=True,
                )
            )
            continue
        data = media_file.read_bytes()
        width, height = _image_dimensions(media_file)
        figures.append(
            FigureRecord(
                image_id=image_id,
                image_file=media_file.name,
                caption=caption,
                mentions=mentions,
                image_hash=hashlib.sha256(data).hexdigest(),
                fig_rid=fig_rid,
                width=width,
                height=height,
            )
        )

    if media_dir.is_dir():
        for media_file in sorted(media_dir.iterdir()):
            if not media_file.is_file() or media_file.suffix.lower() not in MEDIA_EXTENSIONS:
                continue
            image_id = _strip_ext(media_file.name)
            if image_id in seen_ids:
                continue
            seen_ids.add(image_id)
            data = media_file.read_bytes()
            width, height = _image_dimensions(media_file)
            figures.append(
                FigureRecord(
                    image_id=image_id,
                    image_file=media_file.name,
                    caption="",
                    mentions=[],
                    image_hash=hashlib.sha256(data).hexdigest(),
                    fig_rid=image_id,
                    width=width,
                    height=height,
                )
            )

    return ArticleDoc(
        accession_id=media_dir.name,
        title=title,
        abstract=abstract,
        keywords=keywords,
        category=category,
        full_text=full_text,
        license_raw=license_raw,
        license_group=classify_license(license_raw),
        figure_set=figures,
        pmid=pmid,
        date=_date_from_meta(root),
        journal=journal,
    )


def apply_file_list_entry(doc: ArticleDoc, entry: FileListEntry) -> ArticleDoc:
    """Overlay the mirror index's identity fields; the index is authoritative
    for license, citation, date and pmid."""
    doc.accession_id = entry.accession_id
    doc.citation = entry.citation
    if entry.date:
        doc.date = entry.date
    if entry.pmid is not None:
        doc.pmid = entry.pmid
    if entry.license:
        doc.license_raw = entry.license
    doc.license_group = classify_license(doc.license_raw)
    return doc

"""Synthetic three-article corpus used by unit, pipeline, and acceptance tests.

Seven figures total across mixed licenses: PMC2001 (CC BY) has three
nXML-declared figures, PMC2002 (CC BY-NC-ND) has two declared figures plus
one on-disk image the nXML never references, PMC2003 (custom license) has
one figure.  The EXPECTED table is the hand-counted oracle.
"""

from __future__ import annotations

import io
from pathlib import Path

from helpers import make_targz

EXPECTED = {
    "PMC2001": {"figures": 3, "license_group": "commercial", "pmid": 2001},
    "PMC2002": {"figures": 3, "license_group": "noncommercial", "pmid": 2002},
    "PMC2003": {"figures": 1, "license_group": "other", "pmid": None},
}
TOTAL_FIGURES = 7

FILE_LIST_HEADER = "File,Citation,Accession_ID,Date,PMID,License\n"


def make_jpeg(width: int, height: int, rgb: tuple[int, int, int]) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.new("RGB", (width, height), rgb).save(buf, format="JPEG")
    return buf.getvalue()


def _article_nxml(accession: str, title: str, abstract: str, keywords: list[str],
                  journal: str, license_text: str, figs: list[dict], body_paras: list[str]) -> bytes:
    kwd = "".join(f"<kwd>{k}</kwd>" for k in keywords)
    figs_xml = "".join(
        f'<fig id="{f["rid"]}"><label>{f["label"]}</label>'
        f"<caption><p>{f['caption']}</p></caption>"
        f'<graphic xlink:href="{f["href"]}"/></fig>'
        for f in figs
    )
    paras = "".join(f"<p>{p}</p>" for p in body_paras)
    xml = f"""<?xml version="1.0" encoding="UTF-8"?>
<article xmlns:xlink="http://www.w3.org/1999/xlink">
  <front>
    <journal-meta><journal-title-group><journal-title>{journal}</journal-title></journal-title-group></journal-meta>
    <article-meta>
      <article-id pub-id-type="pmc">{accession}</article-id>
      <article-categories><subj-group><subject>Research Article</subject></subj-group></article-categories>
      <title-group><article-title>{title}</article-title></title-group>
      <abstract><p>{abstract}</p></abstract>
      <kwd-group>{kwd}</kwd-group>
      <pub-date pub-type="epub"><day>5</day><month>3</month><year>2021</year></pub-date>
      <permissions><license><license-p>{license_text}</license-p></license></permissions>
    </article-meta>
  </front>
  <body>
    <sec><title>Results</title>{paras}</sec>
    {figs_xml}
  </body>
</article>
"""
    return xml.encode("utf-8")


def build_corpus_files() -> dict[str, dict[str, bytes]]:
    """Per-accession member maps (nxml + jpgs) for the three articles."""
    img = make_jpeg
    a1 = {
        "PMC2001/article.nxml": _article_nxml(
            "PMC2001",
            "Cortical imaging in three subjects",
            "We image cortical structures and quantify signal.",
            ["cortex", "imaging"],
            "Journal of Synthetic Results",
            "CC BY",
            figs=[
                {"rid": "F1", "label": "Figure 1", "href": "fig1.jpg", "caption": "Axial view of the first subject."},
                {"rid": "F2", "label": "Figure 2", "href": "fig2.jpg", "caption": "Coronal view with annotations."},
                {"rid": "F3", "label": "Figure 3", "href": "fig3.jpg", "caption": "Signal distribution across trials."},
            ],
            body_paras=[
                'Overall anatomy is shown in <xref ref-type="fig" rid="F1">Fig. 1</xref>.',
                'Both <xref ref-type="fig" rid="F1 F2">Figs. 1-2</xref> show the lesion.',
                'Quantification appears in <xref ref-type="fig" rid="F3">Fig. 3</xref> below.',
            ],
        ),
        "PMC2001/fig1.jpg": img(24, 18, (200, 30, 30)),
        "PMC2001/fig2.jpg": img(20, 20, (30, 200, 30)),
        "PMC2001/fig3.jpg": img(18, 24, (30, 30, 200)),
        "PMC2001/notes.pdf": b"%PDF discard me",
    }
    a2 = {
        "PMC2002/article.nxml": _article_nxml(
            "PMC2002",
            "Staining outcomes in cultured tissue",
            "Staining protocols compared across cultures.",
            ["staining"],
            "Annals of Generated Data",
            "CC BY-NC-ND",
            figs=[
                {"rid": "F1", "label": "Figure 1", "href": "micro1.jpg", "caption": "Stained culture, day two."},
                {"rid": "F2", "label": "Figure 2", "href": "micro2.jpg", "caption": "Control culture, day two."},
            ],
            body_paras=[
                'Staining is strongest in <xref ref-type="fig" rid="F1">Figure 1</xref>.',
                'The control in <xref ref-type="fig" rid="F2">Figure 2</xref> is uniform; '
                'compare <xref ref-type="fig" rid="F2">Figure 2</xref> again.',
            ],
        ),
        "PMC2002/micro1.jpg": img(32, 16, (120, 90, 10)),
        "PMC2002/micro2.jpg": img(16, 32, (10, 90, 120)),
        "PMC2002/extra.jpg": img(12, 12, (128, 128, 128)),
    }
    a3 = {
        "PMC2003/article.nxml": _article_nxml(
            "PMC2003",
            "A single chart of enrollment",
            "Enrollment over time for a small cohort.",
            [],
            "Bulletin of Worked Examples",
            "Free to read",
            figs=[
                {"rid": "F1", "label": "Figure 1", "href": "chart1.jpg", "caption": "Enrollment by month."},
            ],
            body_paras=[
                'Enrollment is summarized in <xref ref-type="fig" rid="F1">Figure 1</xref>.',
            ],
        ),
        "PMC2003/chart1.jpg": img(28, 14, (240, 240, 10)),
    }
    return {"PMC2001": a1, "PMC2002": a2, "PMC2003": a3}


def build_remote_mirror(root: Path) -> Path:
    """Lay out .tar.gz packages plus file_list.csv under ``root``; returns the
    file list path.  The tree is what a LocalDirTransport serves."""
    root.mkdir(parents=True, exist_ok=True)
    rows = [
        ("oa_package/20/01/PMC2001.tar.gz", "Synth J. 2021;1:1", "PMC2001", "2021-03-05", "2001", "CC BY"),
        ("oa_package/20/02/PMC2002.tar.gz", "Ann Gen. 2021;2:9", "PMC2002", "2021-04-01", "2002", "CC BY-NC-ND"),
        ("oa_package/20/03/PMC2003.tar.gz", "Bull WE. 2020;9:4", "PMC2003", "2020-11-20", "", "CUSTOM HOSPITAL LICENSE"),
    ]
    corpus = build_corpus_files()
    for file_path, _, accession, _, _, _ in rows:
        target = root / file_path
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(make_targz(corpus[accession]))
    file_list = root / "file_list.csv"
    file_list.write_text(
        FILE_LIST_HEADER + "".join(",".join(row) + "\n" for row in rows),
        encoding="utf-8",
    )
    return file_list

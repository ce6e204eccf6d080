"""Capped JSONL persistence for parsed articles, plus exact corpus statistics.

The on-disk schema is frozen in docs/schema.md; files carry at most
``max_per_file`` articles each so downstream batch jobs (and the metadata
service's batch limit) line up with file boundaries.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import ValidationError
from .jats import ArticleDoc, FigureRecord

Tokenizer = Callable[[str], list[str]]

DEFAULT_MAX_PER_FILE = 200
FILE_PATTERN = "articles-%05d.jsonl"


def whitespace_tokenizer(text: str) -> list[str]:
    """Default test tokenizer: Unicode-whitespace split."""
    return text.split()


def article_to_dict(doc: ArticleDoc) -> dict:
    return dataclasses.asdict(doc)


def article_from_dict(data: dict) -> ArticleDoc:
    figures = [FigureRecord(**f) for f in data.get("figure_set", [])]
    fields = {f.name for f in dataclasses.fields(ArticleDoc)}
    kwargs = {k: v for k, v in data.items() if k in fields and k != "figure_set"}
    return ArticleDoc(figure_set=figures, **kwargs)


def write_article_jsonl(
    articles: Sequence[ArticleDoc],
    out_dir: str | Path,
    max_per_file: int = DEFAULT_MAX_PER_FILE,
) -> list[Path]:
    """Write articles in order as capped JSONL files; returns the file paths.

    All files except the last hold exactly ``max_per_file`` records; an
    article never straddles two files.
    """
    if max_per_file < 1:
        raise ValidationError("max_per_file must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    for file_idx in range(0, math.ceil(len(articles) / max_per_file)):
        chunk = articles[file_idx * max_per_file : (file_idx + 1) * max_per_file]
        path = out_dir / (FILE_PATTERN % file_idx)
        with open(path, "w", encoding="utf-8") as fh:
            for doc in chunk:
                try:
                    fh.write(json.dumps(article_to_dict(doc), ensure_ascii=False) + "\n")
                except (TypeError, ValueError) as exc:
                    raise ValidationError(
                        f"cannot serialize article {doc.accession_id}: {exc}"
                    ) from exc
        paths.append(path)
    return paths


def read_article_jsonl(source: str | Path) -> Iterator[ArticleDoc]:
    """Stream articles back from a JSONL file or a directory of them, in
    file-name order."""
    source = Path(source)
    files = sorted(source.glob("articles-*.jsonl")) if source.is_dir() else [source]
    for path in files:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    yield article_from_dict(json.loads(line))


@dataclass(frozen=True)
class FieldStats:
    min: float
    max: float
    median: float
    iqr: float
    total: float

    @staticmethod
    def of(values: Sequence[float]) -> "FieldStats":
        if not values:
            return FieldStats(0, 0, 0, 0, 0)
        arr = np.asarray(values, dtype=np.float64)
        q1, q3 = np.percentile(arr, [25, 75])
        return FieldStats(
            min=float(arr.min()),
            max=float(arr.max()),
            median=float(np.median(arr)),
            iqr=float(q3 - q1),
            total=float(arr.sum()),
        )


@dataclass
class CorpusStats:
    caption_token_length: FieldStats
    caption_char_length: FieldStats
    mention_token_length: FieldStats
    mention_char_length: FieldStats
    full_text_token_length: FieldStats
    full_text_char_length: FieldStats
    image_width: FieldStats
    image_height: FieldStats
    image_area: FieldStats
    articles_total: int = 0
    articles_with_images: int = 0
    articles_text_only: int = 0
    pair_count: int = 0
    mention_count: int = 0
    empty: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def compute_stats(
    articles: Iterable[ArticleDoc],
    tokenizer: Tokenizer = whitespace_tokenizer,
) -> CorpusStats:
    """Exact corpus statistics: min/max/total plus sort-based median and IQR.

    A "pair" is a figure whose image file is present; captions contribute one
    value per pair, mentions one value per mention paragraph, full text one
    per article.
    """
    cap_tok: list[int] = []
    cap_chr: list[int] = []
    men_tok: list[int] = []
    men_chr: list[int] = []
    txt_tok: list[int] = []
    txt_chr: list[int] = []
    widths: list[int] = []
    heights: list[int] = []
    areas: list[int] = []
    articles_total = articles_with_images = pair_count = mention_count = 0

    for doc in articles:
        articles_total += 1
        txt_tok.append(len(tokenizer(doc.full_text)))
        txt_chr.append(len(doc.full_text))
        has_image = False
        for fig in doc.figure_set:
            if fig.file_missing:
                continue
            has_image = True
            pair_count += 1
            cap_tok.append(len(tokenizer(fig.caption)))
            cap_chr.append(len(fig.caption))
            for mention in fig.mentions:
                mention_count += 1
                men_tok.append(len(tokenizer(mention)))
                men_chr.append(len(mention))
            if fig.width is not None and fig.height is not None:
                widths.append(fig.width)
                heights.append(fig.height)
                areas.append(fig.width * fig.height)
        if has_image:
            articles_with_images += 1

    return CorpusStats(
        caption_token_length=FieldStats.of(cap_tok),
        caption_char_length=FieldStats.of(cap_chr),
        mention_token_length=FieldStats.of(men_tok),
        mention_char_length=FieldStats.of(men_chr),
        full_text_token_length=FieldStats.of(txt_tok),
        full_text_char_length=FieldStats.of(txt_chr),
        image_width=FieldStats.of(widths),
        image_height=FieldStats.of(heights),
        image_area=FieldStats.of(areas),
        articles_total=articles_total,
        articles_with_images=articles_with_images,
        articles_text_only=articles_total - articles_with_images,
        pair_count=pair_count,
        mention_count=mention_count,
        empty=articles_total == 0,
    )

"""Concept taxonomy, per-cluster annotation records, majority-vote label
resolution, image-level propagation, and inter-annotator disagreement stats.

Label text is normalized before counting (lowercase, all whitespace and
dashes removed).  Per field, labels named by at least two annotators are
accepted; the highest count becomes the primary label with ties broken
lexicographically on the normalized form, and any label named by exactly one
annotator flags the cluster for review rather than being silently resolved.
A single annotator's labels are accepted as-is but always flagged.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .errors import ValidationError

PANEL_TYPES = ("single", "multi_nonbio", "multi_bio_plots", "multi_bio_assays")

# \s is Unicode-aware for str patterns; ​ (zero-width space) is not in \s
_WS_OR_DASH = re.compile(r"[\s​-]+")


def normalize_label(raw: str) -> str:
    """Lowercase and delete all whitespace and dashes; may return ""."""
    return _WS_OR_DASH.sub("", raw.lower())


@dataclass(frozen=True)
class Taxonomy:
    local_concepts: Mapping[str, tuple[str, ...]]  # global -> locals

    @property
    def global_concepts(self) -> list[str]:
        return list(self.local_concepts)

    def parent_of(self, local: str) -> Optional[str]:
        wanted = normalize_label(local)
        for parent, locals_ in self.local_concepts.items():
            if any(normalize_label(l) == wanted for l in locals_):
                return parent
        return None

    def knows_global(self, label: str) -> bool:
        wanted = normalize_label(label)
        return any(normalize_label(g) == wanted for g in self.local_concepts)

    def knows_local(self, label: str) -> bool:
        return self.parent_of(label) is not None

    def validate(self) -> None:
        normalized_globals = [normalize_label(g) for g in self.local_concepts]
        if len(set(normalized_globals)) != len(normalized_globals):
            raise ValidationError("duplicate global concept after normalization")
        seen_locals: dict[str, str] = {}
        for parent, locals_ in self.local_concepts.items():
            for local in locals_:
                key = normalize_label(local)
                if key in seen_locals and seen_locals[key] != parent:
                    raise ValidationError(
                        f"local concept {local!r} has two parents: {seen_locals[key]!r}, {parent!r}"
                    )
                seen_locals[key] = parent


def load_taxonomy(path: str | Path | None = None) -> Taxonomy:
    """Load the shipped taxonomy, or a user file of the same JSON shape."""
    if path is None:
        text = resources.files("figarchive").joinpath("data/taxonomy.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    data = json.loads(text)
    taxonomy = Taxonomy(local_concepts={k: tuple(v) for k, v in data.items()})
    taxonomy.validate()
    return taxonomy


@dataclass
class ClusterAnnotation:
    annotator_id: str
    cluster_id: int
    panel_type: str
    global_labels: list[str]
    local_labels: list[str]
    submitted_at: str = ""

    def __post_init__(self) -> None:
        if self.panel_type not in PANEL_TYPES:
            raise ValidationError(f"panel_type must be one of {PANEL_TYPES}")
        if not self.global_labels:
            raise ValidationError("global_labels must be non-empty")
        if any(not l for l in self.local_labels):
            raise ValidationError("local labels must be non-empty strings")


@dataclass(frozen=True)
class FieldResolution:
    primary: str
    accepted: tuple[str, ...]  # frequency-ordered, primary first
    vote_counts: dict[str, int]
    needs_review: bool


def resolve_label_field(label_sets: Sequence[Iterable[str]]) -> FieldResolution:
    """Majority-vote one field given each annotator's label set.

    Labels are normalized then counted once per annotator.  Accepted labels
    need >= 2 votes (a lone annotator's labels are accepted outright); the
    primary is the top count, ties lexicographic; any count-1 label sets
    ``needs_review``.
    """
    if not label_sets:
        raise ValidationError("at least one annotation required")
    counts: Counter[str] = Counter()
    for labels in label_sets:
        seen = {normalize_label(l) for l in labels}
        seen.discard("")
        counts.update(seen)
    if not counts:
        raise ValidationError("no usable labels after normalization")

    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    primary = ordered[0][0]
    single_annotator = len(label_sets) == 1
    if single_annotator:
        accepted = [label for label, _ in ordered]
    else:
        accepted = [label for label, count in ordered if count >= 2]
    needs_review = any(count == 1 for count in counts.values())
    return FieldResolution(
        primary=primary,
        accepted=tuple(accepted),
        vote_counts=dict(counts),
        needs_review=needs_review,
    )


@dataclass
class ResolvedClusterLabels:
    cluster_id: int
    panel_type: str
    primary_global: str
    secondary_globals: list[str]
    primary_local: str
    secondary_locals: list[str]
    needs_review: bool
    vote_counts: dict[str, dict[str, int]]
    unknown_concepts: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "panel_type": self.panel_type,
            "primary_global": self.primary_global,
            "secondary_globals": self.secondary_globals,
            "primary_local": self.primary_local,
            "secondary_locals": self.secondary_locals,
            "needs_review": self.needs_review,
            "vote_counts": self.vote_counts,
            "unknown_concepts": self.unknown_concepts,
        }

    @staticmethod
    def from_dict(data: dict) -> "ResolvedClusterLabels":
        return ResolvedClusterLabels(**data)


def resolve_cluster(
    annotations: Sequence[ClusterAnnotation],
    taxonomy: Optional[Taxonomy] = None,
) -> ResolvedClusterLabels:
    """Resolve one cluster's annotations across the three form fields.

    Free-text local labels not in the taxonomy are accepted but reported in
    ``unknown_concepts``.
    """
    if not annotations:
        raise ValidationError("cannot resolve an empty annotation list")
    cluster_ids = {a.cluster_id for a in annotations}
    if len(cluster_ids) != 1:
        raise ValidationError(f"annotations span multiple clusters: {sorted(cluster_ids)}")

    panel = resolve_label_field([[a.panel_type] for a in annotations])
    globals_ = resolve_label_field([a.global_labels for a in annotations])
    has_locals = [a.local_labels for a in annotations if a.local_labels]
    if has_locals:
        locals_ = resolve_label_field(has_locals)
        primary_local = locals_.primary
        secondary_locals = [l for l in locals_.accepted if l != locals_.primary]
        local_counts = locals_.vote_counts
        local_review = locals_.needs_review
    else:
        primary_local = ""
        secondary_locals = []
        local_counts = {}
        local_review = False

    unknown: list[str] = []
    if taxonomy is not None:
        unknown = sorted(
            {l for l in local_counts if not taxonomy.knows_local(l)}
            | {g for g in globals_.vote_counts if not taxonomy.knows_global(g)}
        )

    return ResolvedClusterLabels(
        cluster_id=annotations[0].cluster_id,
        panel_type=panel.primary,
        primary_global=globals_.primary,
        secondary_globals=[g for g in globals_.accepted if g != globals_.primary],
        primary_local=primary_local,
        secondary_locals=secondary_locals,
        needs_review=panel.needs_review or globals_.needs_review or local_review,
        vote_counts={
            "panel": panel.vote_counts,
            "global": globals_.vote_counts,
            "local": local_counts,
        },
        unknown_concepts=unknown,
    )


def resolve_all(
    annotations: Iterable[ClusterAnnotation],
    taxonomy: Optional[Taxonomy] = None,
) -> dict[int, ResolvedClusterLabels]:
    by_cluster: dict[int, list[ClusterAnnotation]] = {}
    for ann in annotations:
        by_cluster.setdefault(ann.cluster_id, []).append(ann)
    return {
        cid: resolve_cluster(anns, taxonomy=taxonomy)
        for cid, anns in sorted(by_cluster.items())
    }


def propagate(
    resolved: Mapping[int, ResolvedClusterLabels],
    assignments: Mapping[str, int],
) -> dict[str, ResolvedClusterLabels]:
    """Copy each cluster's resolved record to every image assigned to it."""
    missing = sorted({cid for cid in assignments.values() if cid not in resolved})
    if missing:
        raise ValidationError(f"no resolution for cluster ids: {missing}")
    return {key: resolved[cid] for key, cid in assignments.items()}


@dataclass
class DisagreementStats:
    per_concept: dict[str, dict[str, float]]  # field -> {min,max,mean,median,iqr}
    histograms: dict[str, dict[str, int]]  # field -> bin label -> count
    values: dict[str, list[float]]
    empty: bool = False


def _cluster_field_disagreement(label_sets: Sequence[Iterable[str]]) -> float:
    """100 * (1 - max label frequency / annotator count)."""
    counts: Counter[str] = Counter()
    for labels in label_sets:
        seen = {normalize_label(l) for l in labels}
        seen.discard("")
        counts.update(seen)
    if not counts:
        return 0.0
    return 100.0 * (1.0 - max(counts.values()) / len(label_sets))


def disagreement_stats(
    annotations: Iterable[ClusterAnnotation],
    bin_width: float = 10.0,
) -> DisagreementStats:
    """Pairwise-disagreement summary per concept field over multi-annotated
    clusters; clusters with a single annotator do not contribute."""
    import numpy as np

    by_cluster: dict[int, list[ClusterAnnotation]] = {}
    for ann in annotations:
        by_cluster.setdefault(ann.cluster_id, []).append(ann)

    values: dict[str, list[float]] = {"panel": [], "global": [], "local": []}
    for anns in by_cluster.values():
        if len(anns) < 2:
            continue
        values["panel"].append(_cluster_field_disagreement([[a.panel_type] for a in anns]))
        values["global"].append(_cluster_field_disagreement([a.global_labels for a in anns]))
        local_sets = [a.local_labels for a in anns if a.local_labels]
        if len(local_sets) >= 2:
            values["local"].append(_cluster_field_disagreement(local_sets))

    if not any(values.values()):
        return DisagreementStats(per_concept={}, histograms={}, values=values, empty=True)

    per_concept: dict[str, dict[str, float]] = {}
    histograms: dict[str, dict[str, int]] = {}
    for concept, vals in values.items():
        if not vals:
            continue
        arr = np.asarray(vals, dtype=np.float64)
        q1, q3 = np.percentile(arr, [25, 75])
        per_concept[concept] = {
            "min": float(arr.min()),
            "max": float(arr.max()),
            "mean": float(arr.mean()),
            "median": float(np.median(arr)),
            "iqr": float(q3 - q1),
        }
        hist: dict[str, int] = {}
        for v in vals:
            lo = int(v // bin_width) * bin_width
            label = f"[{lo:g},{lo + bin_width:g})"
            hist[label] = hist.get(label, 0) + 1
        histograms[concept] = hist
    return DisagreementStats(per_concept=per_concept, histograms=histograms, values=values)


def annotation_to_dict(ann: ClusterAnnotation) -> dict:
    return {
        "annotator_id": ann.annotator_id,
        "cluster_id": ann.cluster_id,
        "panel_type": ann.panel_type,
        "global_labels": ann.global_labels,
        "local_labels": ann.local_labels,
        "submitted_at": ann.submitted_at,
    }


def annotation_from_dict(data: dict) -> ClusterAnnotation:
    return ClusterAnnotation(
        annotator_id=data["annotator_id"],
        cluster_id=int(data["cluster_id"]),
        panel_type=data["panel_type"],
        global_labels=list(data["global_labels"]),
        local_labels=list(data.get("local_labels", [])),
        submitted_at=data.get("submitted_at", ""),
    )


def read_annotation_log(path: str | Path) -> list[ClusterAnnotation]:
    """Read the append-only JSONL log; later (annotator, cluster) entries
    replace earlier ones."""
    latest: dict[tuple[str, int], ClusterAnnotation] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            ann = annotation_from_dict(json.loads(line))
            latest[(ann.annotator_id, ann.cluster_id)] = ann
    return list(latest.values())


def write_resolved_jsonl(resolved: Mapping[int, ResolvedClusterLabels], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for cid in sorted(resolved):
            fh.write(json.dumps(resolved[cid].to_dict(), ensure_ascii=False) + "\n")


def read_resolved_jsonl(path: str | Path) -> dict[int, ResolvedClusterLabels]:
    out: dict[int, ResolvedClusterLabels] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = ResolvedClusterLabels.from_dict(json.loads(line))
                out[rec.cluster_id] = rec
    return out


def export_review_queue(resolved: Mapping[int, ResolvedClusterLabels], path: str | Path) -> int:
    """CSV of clusters needing human re-evaluation; returns the row count."""
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cluster_id", "primary_global", "primary_local",
                         "count1_labels", "unknown_concepts"])
        for cid in sorted(resolved):
            rec = resolved[cid]
            if not rec.needs_review and not rec.unknown_concepts:
                continue
            count1 = sorted(
                label
                for field_counts in rec.vote_counts.values()
                for label, count in field_counts.items()
                if count == 1
            )
            writer.writerow([
                cid, rec.primary_global, rec.primary_local,
                ";".join(count1), ";".join(rec.unknown_concepts),
            ])
            rows += 1
    return rows

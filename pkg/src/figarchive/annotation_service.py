"""HTTP service collecting per-cluster annotations from human reviewers.

Endpoints (JSON):

- ``GET /taxonomy`` -- the hierarchical concept taxonomy
- ``GET /clusters`` -- clusters with sizes and annotation progress
- ``GET /clusters/{id}/sample`` -- sampled montage image refs, the three form
  questions, and the taxonomy
- ``POST /clusters/{id}/annotations`` -- append one annotation (409 on a
  duplicate annotator/cluster pair unless ``?replace=true``)
- ``GET /images/{image_key}`` -- static media for montage thumbnails

Writes go to an append-only JSONL log and are fsynced before the 200 reply;
the newest record per (annotator, cluster) wins on readback.
"""

from __future__ import annotations

import datetime as _dt
import json
import os
import threading
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Query, Response
from pydantic import BaseModel, Field

from .taxonomy import (
    PANEL_TYPES,
    ClusterAnnotation,
    Taxonomy,
    annotation_to_dict,
    load_taxonomy,
)

FORM_QUESTIONS = [
    {
        "field": "panel_type",
        "prompt": "Are most images in this cluster single panel or multi panel?",
        "options": list(PANEL_TYPES),
    },
    {
        "field": "global_labels",
        "prompt": "Which global concepts describe what most images in this cluster share?",
        "options": None,  # filled from the taxonomy
    },
    {
        "field": "local_labels",
        "prompt": "Which local concepts from the taxonomy best describe this cluster?",
        "options": None,  # free text validated against the taxonomy downstream
    },
]


@dataclass
class ServiceState:
    """Everything the service needs: assignments, montage samples, media."""

    assignments: dict[str, int]
    samples: dict[int, list[str]]  # cluster id -> sampled image keys
    log_path: Path
    media_paths: dict[str, Path] = dc_field(default_factory=dict)  # image key -> file
    taxonomy: Taxonomy = dc_field(default_factory=load_taxonomy)
    max_annotators_per_cluster: Optional[int] = None
    max_clusters_per_annotator: Optional[int] = None

    def __post_init__(self) -> None:
        self.log_path = Path(self.log_path)
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._seen: set[tuple[str, int]] = set()
        if self.log_path.exists():
            with open(self.log_path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._seen.add((rec["annotator_id"], int(rec["cluster_id"])))

    def cluster_sizes(self) -> dict[int, int]:
        sizes: dict[int, int] = {}
        for cid in self.assignments.values():
            sizes[cid] = sizes.get(cid, 0) + 1
        for cid in self.samples:
            sizes.setdefault(cid, 0)
        return sizes

    def progress(self) -> dict[int, list[str]]:
        annotators: dict[int, list[str]] = {}
        for annotator, cid in sorted(self._seen):
            annotators.setdefault(cid, []).append(annotator)
        return annotators

    def append(self, ann: ClusterAnnotation, replace: bool) -> None:
        key = (ann.annotator_id, ann.cluster_id)
        with self._lock:
            if key in self._seen and not replace:
                raise KeyError("duplicate")
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(annotation_to_dict(ann), ensure_ascii=False) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._seen.add(key)


class AnnotationIn(BaseModel):
    annotator_id: str = Field(min_length=1)
    panel_type: str
    global_labels: list[str] = Field(min_length=1)
    local_labels: list[str] = Field(default_factory=list)


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="cluster annotation service", version="1.0.0")
    app.state.service = state

    @app.get("/taxonomy")
    def get_taxonomy() -> dict:
        return {g: list(ls) for g, ls in state.taxonomy.local_concepts.items()}

    @app.get("/clusters")
    def list_clusters() -> dict:
        sizes = state.cluster_sizes()
        progress = state.progress()
        return {
            "limits": {
                "max_annotators_per_cluster": state.max_annotators_per_cluster,
                "max_clusters_per_annotator": state.max_clusters_per_annotator,
            },
            "clusters": [
                {
                    "cluster_id": cid,
                    "size": sizes[cid],
                    "annotation_count": len(progress.get(cid, [])),
                    "annotators": progress.get(cid, []),
                }
                for cid in sorted(sizes)
            ],
        }

    @app.get("/clusters/{cluster_id}/sample")
    def cluster_sample(cluster_id: int) -> dict:
        if cluster_id not in state.samples:
            raise HTTPException(status_code=404, detail=f"unknown cluster {cluster_id}")
        questions = []
        for q in FORM_QUESTIONS:
            q = dict(q)
            if q["field"] == "global_labels":
                q["options"] = state.taxonomy.global_concepts
            questions.append(q)
        keys = state.samples[cluster_id]
        return {
            "cluster_id": cluster_id,
            "images": [{"image_key": k, "url": f"/images/{k}"} for k in keys],
            "questions": questions,
            "taxonomy": {g: list(ls) for g, ls in state.taxonomy.local_concepts.items()},
        }

    @app.post("/clusters/{cluster_id}/annotations")
    def post_annotation(
        cluster_id: int,
        body: AnnotationIn,
        replace: bool = Query(default=False),
    ) -> dict:
        if cluster_id not in state.samples:
            raise HTTPException(status_code=404, detail=f"unknown cluster {cluster_id}")
        if body.panel_type not in PANEL_TYPES:
            raise HTTPException(
                status_code=422,
                detail=[{"loc": ["body", "panel_type"],
                         "msg": f"must be one of {PANEL_TYPES}"}],
            )
        if any(not l.strip() for l in body.global_labels + body.local_labels):
            raise HTTPException(
                status_code=422,
                detail=[{"loc": ["body", "labels"], "msg": "labels must be non-empty"}],
            )
        ann = ClusterAnnotation(
            annotator_id=body.annotator_id,
            cluster_id=cluster_id,
            panel_type=body.panel_type,
            global_labels=body.global_labels,
            local_labels=body.local_labels,
            submitted_at=_dt.datetime.now(_dt.timezone.utc).isoformat(),
        )
        try:
            state.append(ann, replace=replace)
        except KeyError:
            raise HTTPException(
                status_code=409,
                detail=f"annotator {body.annotator_id!r} already annotated cluster "
                       f"{cluster_id}; resubmit with ?replace=true",
            ) from None
        return {"status": "stored", "cluster_id": cluster_id, "annotator_id": body.annotator_id}

    @app.get("/images/{image_key}")
    def get_image(image_key: str) -> Response:
        path = state.media_paths.get(image_key)
        if path is None or not Path(path).is_file():
            raise HTTPException(status_code=404, detail=f"no media for {image_key}")
        return Response(content=Path(path).read_bytes(), media_type="image/jpeg")

    return app


def export_openapi(path: str | Path, state: Optional[ServiceState] = None) -> None:
    """Write the OpenAPI document for the service to ``path``."""
    if state is None:
        state = ServiceState(assignments={}, samples={}, log_path=Path(os.devnull))
    app = create_app(state)
    Path(path).write_text(json.dumps(app.openapi(), indent=2))

from __future__ import annotations

import json
import threading

import pytest
from fastapi.testclient import TestClient

from figarchive.annotation_service import ServiceState, create_app, export_openapi
from figarchive.taxonomy import read_annotation_log


@pytest.fixture()
def state(tmp_path):
    media = tmp_path / "media"
    media.mkdir()
    (media / "img0.jpg").write_bytes(b"\xff\xd8fake-jpeg")
    return ServiceState(
        assignments={f"img{i}": i % 2 for i in range(6)},
        samples={0: ["img0", "img2", "img4"], 1: ["img1", "img3", "img5"]},
        log_path=tmp_path / "annotations.jsonl",
        media_paths={"img0": media / "img0.jpg"},
    )


@pytest.fixture()
def client(state):
    return TestClient(create_app(state))


def valid_body(annotator="ann-1"):
    return {
        "annotator_id": annotator,
        "panel_type": "single",
        "global_labels": ["Microscopy"],
        "local_labels": ["light microscopy"],
    }


class TestClusterListing:
    def test_progress_increments_after_post(self, client):
        before = client.get("/clusters").json()
        c0 = next(c for c in before["clusters"] if c["cluster_id"] == 0)
        assert c0["annotation_count"] == 0

        assert client.post("/clusters/0/annotations", json=valid_body()).status_code == 200

        after = client.get("/clusters").json()
        c0 = next(c for c in after["clusters"] if c["cluster_id"] == 0)
        assert c0["annotation_count"] == 1
        assert c0["annotators"] == ["ann-1"]

    def test_sizes_from_assignments(self, client):
        listing = client.get("/clusters").json()["clusters"]
        assert {c["cluster_id"]: c["size"] for c in listing} == {0: 3, 1: 3}


class TestSampleEndpoint:
    def test_sample_returns_refs_questions_taxonomy(self, client):
        data = client.get("/clusters/0/sample").json()
        assert [img["image_key"] for img in data["images"]] == ["img0", "img2", "img4"]
        assert data["images"][0]["url"] == "/images/img0"
        assert len(data["questions"]) == 3
        globals_q = next(q for q in data["questions"] if q["field"] == "global_labels")
        assert "Microscopy" in globals_q["options"]
        assert "Microscopy" in data["taxonomy"]

    def test_unknown_cluster_404(self, client):
        assert client.get("/clusters/999999/sample").status_code == 404


class TestPostAnnotation:
    def test_unknown_cluster_404(self, client):
        assert client.post("/clusters/999999/annotations", json=valid_body()).status_code == 404

    def test_malformed_body_422_with_field_errors(self, client):
        resp = client.post("/clusters/0/annotations", json={"annotator_id": "x"})
        assert resp.status_code == 422
        assert any("panel_type" in str(err.get("loc")) for err in resp.json()["detail"])

    def test_bad_panel_type_422(self, client):
        body = valid_body()
        body["panel_type"] = "sideways"
        resp = client.post("/clusters/0/annotations", json=body)
        assert resp.status_code == 422

    def test_empty_global_labels_422(self, client):
        body = valid_body()
        body["global_labels"] = []
        assert client.post("/clusters/0/annotations", json=body).status_code == 422

    def test_duplicate_409_then_replace(self, client, state):
        assert client.post("/clusters/0/annotations", json=valid_body()).status_code == 200
        assert client.post("/clusters/0/annotations", json=valid_body()).status_code == 409
        resp = client.post("/clusters/0/annotations?replace=true", json=valid_body())
        assert resp.status_code == 200
        # log is append-only: both writes present, readback keeps the newest
        lines = state.log_path.read_text().splitlines()
        assert len(lines) == 2
        assert len(read_annotation_log(state.log_path)) == 1

    def test_write_durable_before_200(self, client, state):
        assert client.post("/clusters/1/annotations", json=valid_body()).status_code == 200
        on_disk = json.loads(state.log_path.read_text().splitlines()[-1])
        assert on_disk["cluster_id"] == 1
        assert on_disk["submitted_at"]

    def test_concurrent_distinct_annotators_both_durable(self, state):
        app = create_app(state)
        results = []

        def submit(name):
            with TestClient(app) as c:
                results.append(c.post("/clusters/0/annotations", json=valid_body(name)).status_code)

        threads = [threading.Thread(target=submit, args=(f"ann-{i}",)) for i in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == [200, 200]
        assert len(state.log_path.read_text().splitlines()) == 2
        assert len(read_annotation_log(state.log_path)) == 2


class TestImages:
    def test_serves_known_image(self, client):
        resp = client.get("/images/img0")
        assert resp.status_code == 200
        assert resp.content.startswith(b"\xff\xd8")

    def test_unknown_image_404(self, client):
        assert client.get("/images/who").status_code == 404


def test_openapi_export(tmp_path):
    out = tmp_path / "openapi.json"
    export_openapi(out)
    spec = json.loads(out.read_text())
    assert "/clusters/{cluster_id}/annotations" in spec["paths"]
    assert "/taxonomy" in spec["paths"]

import io
import json
import threading

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from pagemine.backend import BackendDescriptor, fixture_key, segment_fixture_key
from pagemine.cli import main
from pagemine.core import BBox
from pagemine.service import ServiceSettings, create_app

SUITE_JSON = {
    "suite_id": "mini",
    "nms_iou": 0.5,
    "groups": [
        {"class_name": "figure", "phrases": ["figure", "diagram"], "box_threshold": 0.35, "text_threshold": 0.35}
    ],
}
CAPTION = "figure . diagram ."


def write_page(path, w=64, h=64):
    arr = np.linspace(20, 230, w * h, dtype=np.uint8).reshape(h, w)
    Image.fromarray(arr).save(path)


@pytest.fixture()
def env(tmp_path):
    """One detected+segmented run under a runs root, plus its fixture dir."""
    images = tmp_path / "images"
    images.mkdir()
    for pid in ("p01", "p02"):
        write_page(images / f"{pid}.png")

    config = tmp_path / "config.json"
    config.write_text(json.dumps({"preprocess": {"target_size": 32}}))
    suite = tmp_path / "suite.json"
    suite.write_text(json.dumps(SUITE_JSON))

    fixtures = tmp_path / "fixtures"
    (fixtures / "detect").mkdir(parents=True)
    (fixtures / "segment").mkdir()
    payloads = {
        "p01": [{"box": [4, 4, 16, 16], "score": 0.9, "phrase": "figure"}],
        "p02": [{"box": [8, 8, 24, 24], "score": 0.6, "phrase": "diagram"}],
    }
    for pid, dets in payloads.items():
        (fixtures / "detect" / f"{fixture_key(pid, CAPTION)}.json").write_text(
            json.dumps({"detections": dets})
        )
    for pid, box in (("p01", BBox(4.0, 4.0, 16.0, 16.0)), ("p02", BBox(8.0, 8.0, 24.0, 24.0))):
        key = segment_fixture_key(pid, (box,))
        (fixtures / "segment" / f"{key}.json").write_text(
            json.dumps({"masks": [{"size": [32, 32], "counts": [0, 1024]}]})
        )

    runs_root = tmp_path / "runs"
    run_dir = runs_root / "run1"
    assert main(["preprocess", "--images", str(images), "--out", str(run_dir), "--config", str(config)]) == 0
    assert (
        main(
            ["detect", "--run", str(run_dir), "--config", str(config), "--suite", str(suite),
             "--backend", "fixture", "--fixture-root", str(fixtures)]
        )
        == 0
    )
    assert main(["segment", "--run", str(run_dir), "--backend", "fixture", "--fixture-root", str(fixtures)]) == 0
    return tmp_path, runs_root, fixtures


def make_client(runs_root, fixtures=None, **kwargs):
    backend = None
    if fixtures is not None:
        backend = BackendDescriptor(kind="fixture", fixture_root=str(fixtures))
    settings = ServiceSettings(runs_root=runs_root, backend=backend, **kwargs)
    return TestClient(create_app(settings))


class TestReadEndpoints:
    def test_health(self, env):
        _, runs_root, _ = env
        client = make_client(runs_root)
        body = client.get("/api/health").json()
        assert body["status"] == "ok"

    def test_list_runs(self, env):
        _, runs_root, _ = env
        client = make_client(runs_root)
        runs = client.get("/api/runs").json()["runs"]
        assert [r["run_id"] for r in runs] == ["run1"]
        assert runs[0]["n_pages"] == 2
        assert runs[0]["n_detections"] == 2
        assert runs[0]["suite_id"] == "mini"

    def test_get_run_detail(self, env):
        _, runs_root, _ = env
        client = make_client(runs_root)
        body = client.get("/api/runs/run1").json()
        assert body["config"]["preprocess"]["target_size"] == 32
        assert [p["page_id"] for p in body["pages"]] == ["p01", "p02"]
        assert body["pages"][0]["transform"] == {"sx": 0.5, "sy": 0.5}
        assert body["errors"] == []
        assert "detect" in body["timings"]

    def test_unknown_run_404(self, env):
        _, runs_root, _ = env
        client = make_client(runs_root)
        assert client.get("/api/runs/ghost").status_code == 404

    def test_detections_composite_ids(self, env):
        _, runs_root, _ = env
        client = make_client(runs_root)
        body = client.get("/api/runs/run1/detections").json()
        assert body["total"] == 2
        ids = [d["id"] for d in body["detections"]]
        assert ids == ["run1~p01~0000", "run1~p02~0000"]
        assert body["detections"][0]["local_id"] == "p01~0000"
        assert body["detections"][0]["decision"] is None
        assert body["detections"][0]["mask"]["counts"] == [0, 1024]

    def test_detections_page_filter_and_paging(self, env):
        _, runs_root, _ = env
        client = make_client(runs_root)
        only = client.get("/api/runs/run1/detections", params={"page": "p02"}).json()
        assert [d["page_id"] for d in only["detections"]] == ["p02"]
        second = client.get("/api/runs/run1/detections", params={"offset": 1, "limit": 1}).json()
        assert second["total"] == 2
        assert [d["id"] for d in second["detections"]] == ["run1~p02~0000"]

    def test_bad_paging_422(self, env):
        _, runs_root, _ = env
        client = make_client(runs_root)
        assert client.get("/api/runs/run1/detections", params={"offset": -1}).status_code == 422
        assert client.get("/api/runs/run1/detections", params={"limit": 0}).status_code == 422


class TestImages:
    def test_original_and_preprocessed(self, env):
        _, runs_root, _ = env
        client = make_client(runs_root)
        r = client.get("/api/pages/p01/image")
        assert r.status_code == 200 and r.headers["content-type"] == "image/png"
        with Image.open(io.BytesIO(r.content)) as im:
            assert im.size == (64, 64)
        r = client.get("/api/pages/p01/image", params={"space": "preprocessed"})
        with Image.open(io.BytesIO(r.content)) as im:
            assert im.size == (32, 32)

    def test_etag_304(self, env):
        _, runs_root, _ = env
        client = make_client(runs_root)
        first = client.get("/api/pages/p01/image")
        etag = first.headers["etag"]
        again = client.get("/api/pages/p01/image", headers={"If-None-Match": etag})
        assert again.status_code == 304

    def test_bad_space_422_unknown_page_404(self, env):
        _, runs_root, _ = env
        client = make_client(runs_root)
        assert client.get("/api/pages/p01/image", params={"space": "warped"}).status_code == 422
        assert client.get("/api/pages/ghost/image").status_code == 404

    def test_non_png_source_reencoded(self, env):
        tmp_path, runs_root, fixtures = env
        jpg_dir = tmp_path / "jpgs"
        jpg_dir.mkdir()
        write_page(jpg_dir / "p09.jpg", w=40, h=40)
        config = tmp_path / "config.json"
        assert main(["preprocess", "--images", str(jpg_dir), "--out", str(runs_root / "run2"), "--config", str(config)]) == 0
        client = make_client(runs_root)
        r = client.get("/api/pages/p09/image")
        assert r.status_code == 200
        with Image.open(io.BytesIO(r.content)) as im:
            assert im.format == "PNG" and im.size == (40, 40)


class TestDecisions:
    def test_post_and_surface(self, env):
        _, runs_root, _ = env
        client = make_client(runs_root)
        r = client.post(
            "/api/detections/run1~p01~0000/decision",
            json={"status": "accepted", "reviewer": "ada"},
        )
        assert r.status_code == 200
        body = r.json()
        assert body["detection_id"] == "run1~p01~0000"
        dets = client.get("/api/runs/run1/detections").json()["detections"]
        assert dets[0]["decision"] == "accepted"
        assert dets[1]["decision"] is None
        summary = client.get("/api/runs").json()["runs"][0]
        assert summary["n_accepted"] == 1

    def test_latest_decision_wins(self, env):
        _, runs_root, _ = env
        client = make_client(runs_root)
        client.post("/api/detections/run1~p01~0000/decision", json={"status": "accepted"})
        client.post("/api/detections/run1~p01~0000/decision", json={"status": "rejected"})
        dets = client.get("/api/runs/run1/detections").json()["detections"]
        assert dets[0]["decision"] == "rejected"

    def test_bad_status_400(self, env):
        _, runs_root, _ = env
        client = make_client(runs_root)
        r = client.post("/api/detections/run1~p01~0000/decision", json={"status": "shrug"})
        assert r.status_code == 400

    def test_unknown_detection_404(self, env):
        _, runs_root, _ = env
        client = make_client(runs_root)
        assert client.post("/api/detections/run1~p09~0000/decision", json={"status": "accepted"}).status_code == 404
        assert client.post("/api/detections/no-tilde/decision", json={"status": "accepted"}).status_code == 404
        assert client.post("/api/detections/ghost~p01~0000/decision", json={"status": "accepted"}).status_code == 404

    def test_concurrent_writes_all_recorded(self, env):
        _, runs_root, _ = env
        client = make_client(runs_root)
        codes = []

        def post(det_id, status):
            r = client.post(f"/api/detections/{det_id}/decision", json={"status": status})
            codes.append(r.status_code)

        threads = [
            threading.Thread(target=post, args=("run1~p01~0000", "accepted")),
            threading.Thread(target=post, args=("run1~p02~0000", "rejected")),
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert codes == [200, 200]
        log = (runs_root / "run1" / "decisions.jsonl").read_text().splitlines()
        assert len(log) == 2

    def test_restart_preserves_state(self, env):
        _, runs_root, _ = env
        client = make_client(runs_root)
        client.post("/api/detections/run1~p01~0000/decision", json={"status": "accepted", "reviewer": "ada"})
        del client

        fresh = make_client(runs_root)
        dets = fresh.get("/api/runs/run1/detections").json()["detections"]
        assert dets[0]["decision"] == "accepted"
        assert fresh.get("/api/runs").json()["runs"][0]["n_accepted"] == 1


class TestSessions:
    def test_no_backend_503(self, env):
        _, runs_root, _ = env
        client = make_client(runs_root)
        r = client.post("/api/sessions", json={"page_ids": ["p01"], "suite": SUITE_JSON})
        assert r.status_code == 503

    def test_unhealthy_backend_503_with_health(self, env, tmp_path):
        _, runs_root, _ = env
        client = make_client(runs_root, fixtures=tmp_path / "absent-fixtures")
        r = client.post("/api/sessions", json={"page_ids": ["p01"], "suite": SUITE_JSON})
        assert r.status_code == 503
        assert "health" in r.json()["detail"]

    def test_bad_page_ids_400(self, env):
        _, runs_root, fixtures = env
        client = make_client(runs_root, fixtures)
        assert client.post("/api/sessions", json={"page_ids": [], "suite": SUITE_JSON}).status_code == 400
        assert client.post("/api/sessions", json={"page_ids": "p01", "suite": SUITE_JSON}).status_code == 400
        assert client.post("/api/sessions", json={"suite": SUITE_JSON}).status_code == 400

    def test_malformed_suite_400(self, env):
        _, runs_root, fixtures = env
        client = make_client(runs_root, fixtures)
        for bad in ("no-such-builtin", {"suite_id": "x"}, None, 7):
            r = client.post("/api/sessions", json={"page_ids": ["p01"], "suite": bad})
            assert r.status_code == 400, bad

    def test_over_page_limit_422(self, env):
        _, runs_root, fixtures = env
        client = make_client(runs_root, fixtures, session_page_limit=1)
        r = client.post("/api/sessions", json={"page_ids": ["p01", "p02"], "suite": SUITE_JSON})
        assert r.status_code == 422

    def test_unknown_pages_404(self, env):
        _, runs_root, fixtures = env
        client = make_client(runs_root, fixtures)
        r = client.post("/api/sessions", json={"page_ids": ["p01", "ghost"], "suite": SUITE_JSON})
        assert r.status_code == 404
        assert "ghost" in r.json()["detail"]

    def test_session_runs_pipeline(self, env):
        _, runs_root, fixtures = env
        client = make_client(runs_root, fixtures)
        r = client.post("/api/sessions", json={"page_ids": ["p01", "p02"], "suite": SUITE_JSON})
        assert r.status_code == 200
        body = r.json()
        assert body["n_detections"] == 2 and body["n_errors"] == 0
        run_id = body["run_id"]
        assert run_id.startswith("session-")

        detail = client.get(f"/api/runs/{run_id}").json()
        assert detail["session"]["parent_run"] == {"p01": "run1", "p02": "run1"}
        assert detail["config"]["preprocess"]["target_size"] == 32
        dets = client.get(f"/api/runs/{run_id}/detections").json()["detections"]
        assert all(d["mask"] is not None for d in dets)
        # decisions work on the session's composite ids
        rid = dets[0]["id"]
        assert client.post(f"/api/detections/{rid}/decision", json={"status": "accepted"}).status_code == 200

    def test_session_survives_restart(self, env):
        _, runs_root, fixtures = env
        client = make_client(runs_root, fixtures)
        run_id = client.post("/api/sessions", json={"page_ids": ["p01"], "suite": SUITE_JSON}).json()["run_id"]
        fresh = make_client(runs_root)
        runs = {r["run_id"] for r in fresh.get("/api/runs").json()["runs"]}
        assert runs == {"run1", run_id}

    def test_mixed_sizes_422(self, env, tmp_path):
        tmp, runs_root, fixtures = env
        other_images = tmp_path / "other"
        other_images.mkdir()
        write_page(other_images / "p55.png")
        big_cfg = tmp_path / "big.json"
        big_cfg.write_text(json.dumps({"preprocess": {"target_size": 64}}))
        assert main(["preprocess", "--images", str(other_images), "--out", str(runs_root / "run2"), "--config", str(big_cfg)]) == 0
        client = make_client(runs_root, fixtures)
        r = client.post("/api/sessions", json={"page_ids": ["p01", "p55"], "suite": SUITE_JSON})
        assert r.status_code == 422


class TestAuth:
    def test_token_required(self, env):
        _, runs_root, _ = env
        client = make_client(runs_root, token="sesame")
        assert client.get("/api/runs").status_code == 401
        assert client.get("/api/runs", headers={"Authorization": "Bearer wrong"}).status_code == 401
        assert client.get("/api/runs", headers={"Authorization": "Bearer sesame"}).status_code == 200


class TestExportEndpoint:
    def test_export_respects_decisions(self, env, tmp_path):
        _, runs_root, _ = env
        client = make_client(runs_root)
        client.post("/api/detections/run1~p01~0000/decision", json={"status": "rejected"})
        out = tmp_path / "bundle"
        r = client.post("/api/runs/run1/export", json={"out_dir": str(out)})
        assert r.status_code == 200
        body = r.json()
        assert body["annotations"] == 1
        coco = json.loads((out / "coco.json").read_text())
        assert [a["detection_id"] for a in coco["annotations"]] == ["p02~0000"]

    def test_default_out_dir(self, env):
        _, runs_root, _ = env
        client = make_client(runs_root)
        r = client.post("/api/runs/run1/export")
        assert r.status_code == 200
        assert (runs_root / "run1" / "export" / "coco.json").is_file()

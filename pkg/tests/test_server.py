"""HTTP API: tiles, job lifecycle, idempotency, journal replay. Runs a real
server on an ephemeral port."""
import io
import json
import threading
import time
import urllib.error
import urllib.request

import numpy as np
import pytest
from PIL import Image

from tcrcount.model import ModelConfig, build_unet, save_weights
from tcrcount.pipeline import PipelineConfig
from tcrcount.postprocess import Thresholds
from tcrcount.server import AnalysisApp, make_server
from tcrcount.synth import SynthParams, generate_synthetic_slide

MPP_20X = 2.0 / 4.4


def _get(url, expect=200):
    try:
        with urllib.request.urlopen(url) as resp:
            return resp.status, dict(resp.headers), resp.read()
    except urllib.error.HTTPError as err:
        return err.code, dict(err.headers), err.read()


def _post(url, payload, expect=202):
    req = urllib.request.Request(url, data=json.dumps(payload).encode(),
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read())


@pytest.fixture(scope="module")
def server(tmp_path_factory):
    root = tmp_path_factory.mktemp("srv")
    slides = root / "slides"
    res = generate_synthetic_slide(
        SynthParams(width=512, height=512, mpp=MPP_20X, seed=31, n_blobs=1),
        slides / "demo")
    model = build_unet(ModelConfig(levels=2, base_channels=4, out_maps=2), seed=2)
    save_weights(model, root / "det.fcnw")
    cfg = PipelineConfig(det_weights=str(root / "det.fcnw"), det_magnification=20.0,
                         thresholds=Thresholds(0.3, 0.5), interior=256)
    cfg.save(root / "pipeline.json")
    app = AnalysisApp(slide_root=slides, config_path=root / "pipeline.json",
                      data_dir=root / "data", workers=1)
    httpd = make_server("127.0.0.1", 0, app)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{httpd.server_address[1]}"
    yield base, app, root
    httpd.shutdown()
    app.shutdown()


def _wait_done(base, job_id, timeout=60.0):
    deadline = time.time() + timeout
    last = None
    while time.time() < deadline:
        _, _, body = _get(f"{base}/api/jobs/{job_id}")
        last = json.loads(body)
        if last["status"] in ("done", "failed"):
            return last
        time.sleep(0.1)
    raise TimeoutError(f"job stuck: {last}")


class TestSlides:
    def test_registry_lists_slide(self, server):
        base, _, _ = server
        status, _, body = _get(f"{base}/api/slides")
        assert status == 200
        entries = json.loads(body)
        assert [e["id"] for e in entries] == ["demo"]
        assert entries[0]["width"] == 512
        assert entries[0]["tile_size"] == 256
        assert len(entries[0]["levels"]) >= 1

    def test_tile_png_decodes(self, server):
        base, _, _ = server
        status, headers, body = _get(f"{base}/api/slides/demo/tiles/0/0/0")
        assert status == 200
        assert headers["Content-Type"] == "image/png"
        img = np.asarray(Image.open(io.BytesIO(body)))
        assert img.shape == (256, 256, 3)

    def test_tile_repeat_identical_with_validator(self, server):
        base, _, _ = server
        s1, h1, b1 = _get(f"{base}/api/slides/demo/tiles/0/1/1")
        s2, h2, b2 = _get(f"{base}/api/slides/demo/tiles/0/1/1")
        assert b1 == b2
        assert h1["ETag"] == h2["ETag"] and h1["ETag"].startswith('"')

    def test_tile_out_of_range_404(self, server):
        base, _, _ = server
        status, _, _ = _get(f"{base}/api/slides/demo/tiles/0/9/9")
        assert status == 404

    def test_unknown_slide_404(self, server):
        base, _, _ = server
        status, _, _ = _get(f"{base}/api/slides/nope")
        assert status == 404


class TestJobs:
    def test_full_lifecycle(self, server):
        base, _, _ = server
        status, out = _post(f"{base}/api/slides/demo/analyze",
                            {"region": {"x": 0, "y": 0, "w": 256, "h": 256}})
        assert status == 202
        job_id = out["job_id"]
        record = _wait_done(base, job_id)
        assert record["status"] == "done"
        assert record["progress"]["done"] == record["progress"]["total"] > 0
        status, _, body = _get(f"{base}/api/jobs/{job_id}/result")
        assert status == 200
        result = json.loads(body)
        for key in ("overall_tcr", "n_cells", "cells", "heatmap", "timing",
                    "throughput_mm2_s"):
            assert key in result
        assert result["region"] == [0, 0, 256, 256]

    def test_omitted_region_defaults_to_full_bounds(self, server):
        base, _, _ = server
        _, out = _post(f"{base}/api/slides/demo/analyze", {})
        record = _wait_done(base, out["job_id"])
        assert record["region"] == {"x": 0, "y": 0, "w": 512, "h": 512}

    def test_out_of_bounds_region_422(self, server):
        base, _, _ = server
        status, _ = _post(f"{base}/api/slides/demo/analyze",
                          {"region": {"x": -5, "y": 0, "w": 10, "h": 10}})
        assert status == 422
        status, _ = _post(f"{base}/api/slides/demo/analyze",
                          {"region": {"x": 0, "y": 0, "w": 9000, "h": 10}})
        assert status == 422

    def test_unknown_slide_analyze_404(self, server):
        base, _, _ = server
        status, _ = _post(f"{base}/api/slides/ghost/analyze", {})
        assert status == 404

    def test_result_before_done_409(self, server):
        base, app, _ = server
        _, out = _post(f"{base}/api/slides/demo/analyze",
                       {"region": {"x": 0, "y": 0, "w": 256, "h": 256},
                        "idempotency_key": "pending-one"})
        status, _, _ = _get(f"{base}/api/jobs/{out['job_id']}/result")
        # may already be done on a fast box; only 409 or 200 are legal
        assert status in (200, 409)
        _wait_done(base, out["job_id"])

    def test_unknown_job_404(self, server):
        base, _, _ = server
        assert _get(f"{base}/api/jobs/missing")[0] == 404

    def test_idempotency_same_region_same_job(self, server):
        base, _, _ = server
        body = {"region": {"x": 0, "y": 0, "w": 128, "h": 128},
                "idempotency_key": "k1"}
        _, a = _post(f"{base}/api/slides/demo/analyze", body)
        _, b = _post(f"{base}/api/slides/demo/analyze", body)
        assert a["job_id"] == b["job_id"]

    def test_idempotency_conflicting_region_409(self, server):
        base, _, _ = server
        _, _ = _post(f"{base}/api/slides/demo/analyze",
                     {"region": {"x": 0, "y": 0, "w": 128, "h": 128},
                      "idempotency_key": "k2"})
        status, _ = _post(f"{base}/api/slides/demo/analyze",
                          {"region": {"x": 64, "y": 0, "w": 128, "h": 128},
                           "idempotency_key": "k2"})
        assert status == 409

    def test_progress_monotone(self, server):
        base, _, _ = server
        _, out = _post(f"{base}/api/slides/demo/analyze", {})
        seen = []
        for _ in range(200):
            _, _, body = _get(f"{base}/api/jobs/{out['job_id']}")
            rec = json.loads(body)
            seen.append(rec["progress"]["done"])
            if rec["status"] in ("done", "failed"):
                break
            time.sleep(0.05)
        assert seen == sorted(seen)

    def test_result_immutable_once_done(self, server):
        base, _, _ = server
        _, out = _post(f"{base}/api/slides/demo/analyze",
                       {"region": {"x": 0, "y": 0, "w": 128, "h": 128},
                        "idempotency_key": "k3"})
        _wait_done(base, out["job_id"])
        _, _, first = _get(f"{base}/api/jobs/{out['job_id']}/result")
        time.sleep(0.1)
        _, _, second = _get(f"{base}/api/jobs/{out['job_id']}/result")
        assert first == second


class TestJournalReplay:
    def test_restart_preserves_jobs_and_fails_running(self, tmp_path):
        slides = tmp_path / "slides"
        generate_synthetic_slide(
            SynthParams(width=384, height=384, mpp=MPP_20X, seed=32), slides / "s0")
        model = build_unet(ModelConfig(levels=1, base_channels=2, out_maps=2), seed=0)
        save_weights(model, tmp_path / "det.fcnw")
        cfg = PipelineConfig(det_weights=str(tmp_path / "det.fcnw"),
                             det_magnification=20.0, thresholds=Thresholds(0.3, 0.5))
        cfg.save(tmp_path / "p.json")

        data = tmp_path / "data"
        data.mkdir()
        # forge a journal as a crashed server would leave it
        events = [
            {"event": "submitted", "job": "aaa", "slide": "s0",
             "region": {"x": 0, "y": 0, "w": 64, "h": 64}, "ts": 1.0,
             "idempotency_key": None},
            {"event": "started", "job": "aaa", "ts": 1.1},
            {"event": "submitted", "job": "bbb", "slide": "s0",
             "region": {"x": 0, "y": 0, "w": 384, "h": 384}, "ts": 2.0,
             "idempotency_key": None},
            {"event": "submitted", "job": "ccc", "slide": "s0",
             "region": {"x": 0, "y": 0, "w": 32, "h": 32}, "ts": 3.0,
             "idempotency_key": None},
            {"event": "done", "job": "ccc", "result": str(data / "result-ccc.json"),
             "ts": 3.5},
        ]
        (data / "result-ccc.json").write_text(json.dumps({"overall_tcr": 0.25}))
        with open(data / "jobs.journal", "w") as fh:
            for ev in events:
                fh.write(json.dumps(ev) + "\n")

        app = AnalysisApp(slide_root=slides, config_path=tmp_path / "p.json",
                          data_dir=data, workers=1)
        try:
            # the job that was running at crash time is failed, not lost
            assert app.jobs["aaa"].status == "failed"
            assert "restart" in app.jobs["aaa"].error
            # the finished job survives with its result
            assert app.jobs["ccc"].status == "done"
            assert json.loads(open(app.jobs["ccc"].result_path).read())["overall_tcr"] == 0.25
            # the queued job is re-queued and eventually completes
            deadline = time.time() + 60
            while app.jobs["bbb"].status not in ("done", "failed") and time.time() < deadline:
                time.sleep(0.1)
            assert app.jobs["bbb"].status == "done"
        finally:
            app.shutdown()

"""Analysis service: slide tiles for the viewer, asynchronous region
analysis jobs, and persisted results.

State is a flat-file, append-only journal (JSONL) plus one result JSON per
job; replaying the journal on startup restores every job, so a crash never
silently loses one (jobs that were running are marked failed, queued ones
are re-queued). Job state mutations all pass through one lock; pipeline
execution happens on a dedicated worker thread pool; finished results are
immutable files read lock-free.
"""
from __future__ import annotations

import io
import json
import queue
import re
import threading
import time
import uuid
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

from PIL import Image

from .pipeline import PipelineConfig, Rect, run_pipeline
from .slide import SlidePyramid

API = "/api"


@dataclass
class JobRecord:
    job_id: str
    slide_id: str
    region: Rect
    status: str = "queued"              # queued -> running -> done | failed
    submitted_at: float = 0.0
    finished_at: Optional[float] = None
    error: Optional[str] = None
    result_path: Optional[str] = None
    progress_done: int = 0
    progress_total: int = 0
    idempotency_key: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "job_id": self.job_id,
            "slide_id": self.slide_id,
            "region": {"x": self.region.x, "y": self.region.y,
                       "w": self.region.w, "h": self.region.h},
            "status": self.status,
            "submitted_at": self.submitted_at,
            "finished_at": self.finished_at,
            "error": self.error,
            "progress": {"done": self.progress_done, "total": self.progress_total},
        }


class HttpError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


class AnalysisApp:
    """Everything behind the HTTP handler; owns slides, jobs, the journal."""

    def __init__(self, slide_root, config_path, data_dir, workers: int = 1,
                 pipeline_workers: int = 1, static_dir=None):
        self.slide_root = Path(slide_root)
        self.config = PipelineConfig.load(config_path)
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.pipeline_workers = max(1, pipeline_workers)
        self.static_dir = Path(static_dir) if static_dir else None
        self.slides: dict[str, SlidePyramid] = {}
        for sub in sorted(self.slide_root.iterdir()):
            if (sub / "manifest.json").exists():
                self.slides[sub.name] = SlidePyramid.open(sub)
        self.jobs: dict[str, JobRecord] = {}
        self.idempotency: dict[str, str] = {}
        self.lock = threading.Lock()
        self.queue: "queue.Queue[str]" = queue.Queue()
        self.journal_path = self.data_dir / "jobs.journal"
        self._journal_fh = None
        self._replay_journal()
        self.workers = [threading.Thread(target=self._worker, daemon=True)
                        for _ in range(max(1, workers))]
        for w in self.workers:
            w.start()

    # ------------------------------------------------------------ journal

    def _journal(self, event: dict) -> None:
        if self._journal_fh is None:
            self._journal_fh = open(self.journal_path, "a")
        self._journal_fh.write(json.dumps(event) + "\n")
        self._journal_fh.flush()

    def _replay_journal(self) -> None:
        if not self.journal_path.exists():
            return
        with open(self.journal_path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                ev = json.loads(line)
                kind = ev["event"]
                if kind == "submitted":
                    r = ev["region"]
                    rec = JobRecord(job_id=ev["job"], slide_id=ev["slide"],
                                    region=Rect(r["x"], r["y"], r["w"], r["h"]),
                                    submitted_at=ev["ts"],
                                    idempotency_key=ev.get("idempotency_key"))
                    self.jobs[rec.job_id] = rec
                    if rec.idempotency_key:
                        self.idempotency[rec.idempotency_key] = rec.job_id
                elif kind == "started":
                    self.jobs[ev["job"]].status = "running"
                elif kind == "done":
                    rec = self.jobs[ev["job"]]
                    rec.status = "done"
                    rec.finished_at = ev["ts"]
                    rec.result_path = ev["result"]
                elif kind == "failed":
                    rec = self.jobs[ev["job"]]
                    rec.status = "failed"
                    rec.finished_at = ev["ts"]
                    rec.error = ev["error"]
        # crash recovery: never lose a job silently
        for rec in self.jobs.values():
            if rec.status == "running":
                rec.status = "failed"
                rec.error = "interrupted by server restart"
                rec.finished_at = time.time()
                self._journal({"event": "failed", "job": rec.job_id,
                               "error": rec.error, "ts": rec.finished_at})
            elif rec.status == "queued":
                self.queue.put(rec.job_id)

    # ------------------------------------------------------------- worker

    def _worker(self) -> None:
        while True:
            job_id = self.queue.get()
            if job_id is None:
                return
            with self.lock:
                rec = self.jobs[job_id]
                rec.status = "running"
                self._journal({"event": "started", "job": job_id, "ts": time.time()})
            try:
                slide = self.slides[rec.slide_id]

                def progress(done, total, _rec=rec):
                    _rec.progress_done = done
                    _rec.progress_total = total

                out = self.data_dir / f"result-{job_id}.json"
                tmp = self.data_dir / f"result-{job_id}.json.tmp"
                result = run_pipeline(slide, rec.region, self.config,
                                      workers=self.pipeline_workers,
                                      progress=progress)
                tmp.write_text(json.dumps(result.to_json()))
                tmp.rename(out)  # result becomes visible atomically
                with self.lock:
                    rec.status = "done"
                    rec.finished_at = time.time()
                    rec.result_path = str(out)
                    self._journal({"event": "done", "job": job_id,
                                   "result": str(out), "ts": rec.finished_at})
            except Exception as exc:  # noqa: BLE001 - job faults become failed status
                with self.lock:
                    rec.status = "failed"
                    rec.finished_at = time.time()
                    rec.error = f"{type(exc).__name__}: {exc}"
                    self._journal({"event": "failed", "job": job_id,
                                   "error": rec.error, "ts": rec.finished_at})

    def shutdown(self) -> None:
        for _ in self.workers:
            self.queue.put(None)

    # ---------------------------------------------------------- endpoints

    def list_slides(self) -> list[dict]:
        return [{
            "id": sid,
            "width": s.width, "height": s.height, "mpp": s.mpp,
            "tile_size": s.tile_size,
            "levels": [{"index": lv.index, "width": lv.width, "height": lv.height}
                       for lv in s.levels],
        } for sid, s in sorted(self.slides.items())]

    def slide_info(self, slide_id: str) -> dict:
        if slide_id not in self.slides:
            raise HttpError(404, f"unknown slide {slide_id!r}")
        return next(e for e in self.list_slides() if e["id"] == slide_id)

    def tile_png(self, slide_id: str, level: int, tx: int, ty: int) -> tuple[bytes, str]:
        if slide_id not in self.slides:
            raise HttpError(404, f"unknown slide {slide_id!r}")
        slide = self.slides[slide_id]
        if not (0 <= level < len(slide.levels)):
            raise HttpError(404, f"level {level} out of range")
        lv = slide.levels[level]
        rec = lv.tiles.get((tx, ty))
        if rec is None:
            raise HttpError(404, f"tile ({tx},{ty}) outside level {level} grid")
        pixels = slide._tile(lv, tx, ty)
        buf = io.BytesIO()
        Image.fromarray(pixels).save(buf, format="PNG")
        return buf.getvalue(), f'"{rec["crc32"]:08x}"'

    def submit(self, slide_id: str, body: dict) -> dict:
        if slide_id not in self.slides:
            raise HttpError(404, f"unknown slide {slide_id!r}")
        slide = self.slides[slide_id]
        region = body.get("region")
        if region is None:
            rect = Rect(0, 0, slide.width, slide.height)
        else:
            try:
                rect = Rect(int(region["x"]), int(region["y"]),
                            int(region["w"]), int(region["h"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise HttpError(422, f"malformed region: {exc}")
            if rect.x < 0 or rect.y < 0 or rect.w <= 0 or rect.h <= 0 \
                    or rect.x + rect.w > slide.width or rect.y + rect.h > slide.height:
                raise HttpError(422, f"region {tuple(rect)} outside slide bounds")
        key = body.get("idempotency_key")
        with self.lock:
            if key is not None:
                existing = self.idempotency.get(key)
                if existing is not None:
                    prior = self.jobs[existing]
                    if prior.slide_id == slide_id and prior.region == rect:
                        return {"job_id": existing}
                    raise HttpError(409, "idempotency key reused with a different region")
            job_id = uuid.uuid4().hex[:12]
            rec = JobRecord(job_id=job_id, slide_id=slide_id, region=rect,
                            submitted_at=time.time(), idempotency_key=key)
            self.jobs[job_id] = rec
            if key is not None:
                self.idempotency[key] = job_id
            self._journal({"event": "submitted", "job": job_id, "slide": slide_id,
                           "region": {"x": rect.x, "y": rect.y, "w": rect.w, "h": rect.h},
                           "idempotency_key": key, "ts": rec.submitted_at})
        self.queue.put(job_id)
        return {"job_id": job_id}

    def job_status(self, job_id: str) -> dict:
        rec = self.jobs.get(job_id)
        if rec is None:
            raise HttpError(404, f"unknown job {job_id!r}")
        with self.lock:
            return rec.to_json()

    def job_result(self, job_id: str) -> dict:
        rec = self.jobs.get(job_id)
        if rec is None:
            raise HttpError(404, f"unknown job {job_id!r}")
        if rec.status != "done":
            raise HttpError(409, f"job {job_id} is {rec.status}, result not available")
        with open(rec.result_path) as fh:
            return json.load(fh)


_ROUTES = [
    ("GET", re.compile(r"^/api/slides$"), "r_slides"),
    ("GET", re.compile(r"^/api/slides/([^/]+)$"), "r_slide"),
    ("GET", re.compile(r"^/api/slides/([^/]+)/tiles/(\d+)/(\d+)/(\d+)$"), "r_tile"),
    ("POST", re.compile(r"^/api/slides/([^/]+)/analyze$"), "r_analyze"),
    ("GET", re.compile(r"^/api/jobs/([^/]+)$"), "r_job"),
    ("GET", re.compile(r"^/api/jobs/([^/]+)/result$"), "r_result"),
]

_MIME = {".html": "text/html", ".js": "text/javascript", ".css": "text/css",
         ".map": "application/json", ".png": "image/png", ".svg": "image/svg+xml"}


class _Handler(BaseHTTPRequestHandler):
    app: AnalysisApp  # set by make_server

    protocol_version = "HTTP/1.1"

    def log_message(self, *args):  # tests stay quiet
        pass

    def _send_json(self, obj, status=200):
        body = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _dispatch(self, method: str):
        path = self.path.split("?", 1)[0]
        try:
            for m, pattern, name in _ROUTES:
                if m != method:
                    continue
                match = pattern.match(path)
                if match:
                    getattr(self, name)(*match.groups())
                    return
            if method == "GET" and self._static(path):
                return
            raise HttpError(404, f"no route for {method} {path}")
        except HttpError as err:
            self._send_json({"error": err.message}, err.status)
        except Exception as exc:  # noqa: BLE001
            self._send_json({"error": f"{type(exc).__name__}: {exc}"}, 500)

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    # ----- routes

    def r_slides(self):
        self._send_json(self.app.list_slides())

    def r_slide(self, slide_id):
        self._send_json(self.app.slide_info(slide_id))

    def r_tile(self, slide_id, level, tx, ty):
        png, etag = self.app.tile_png(slide_id, int(level), int(tx), int(ty))
        if self.headers.get("If-None-Match") == etag:
            self.send_response(304)
            self.send_header("ETag", etag)
            self.send_header("Content-Length", "0")
            self.end_headers()
            return
        self.send_response(200)
        self.send_header("Content-Type", "image/png")
        self.send_header("ETag", etag)
        self.send_header("Cache-Control", "public, max-age=31536000, immutable")
        self.send_header("Content-Length", str(len(png)))
        self.end_headers()
        self.wfile.write(png)

    def r_analyze(self, slide_id):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b"{}"
        try:
            body = json.loads(raw or b"{}")
        except json.JSONDecodeError as exc:
            raise HttpError(422, f"invalid JSON body: {exc}")
        self._send_json(self.app.submit(slide_id, body), status=202)

    def r_job(self, job_id):
        self._send_json(self.app.job_status(job_id))

    def r_result(self, job_id):
        self._send_json(self.app.job_result(job_id))

    # ----- static viewer assets

    def _static(self, path: str) -> bool:
        root = self.app.static_dir
        if root is None:
            return False
        rel = "index.html" if path in ("", "/") else path.lstrip("/")
        target = (root / rel).resolve()
        if not str(target).startswith(str(root.resolve())) or not target.is_file():
            return False
        body = target.read_bytes()
        self.send_response(200)
        self.send_header("Content-Type", _MIME.get(target.suffix, "application/octet-stream"))
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)
        return True


def make_server(host: str, port: int, app: AnalysisApp) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (_Handler,), {"app": app})
    return ThreadingHTTPServer((host, port), handler)

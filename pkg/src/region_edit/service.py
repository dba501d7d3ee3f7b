"""HTTP job service: edit jobs, synchronous mask preview, schemas.

Persistence is a plain directory store — jobs/<id>/{request.json,
status.json, input.png, result.png, mask.png, soft_mask.png,
trace.jsonl} — with write-temp-then-rename updates so readers never see
partial records and every terminal job survives a restart.
"""

from __future__ import annotations

import base64
import contextlib
import json
import os
import queue
import threading
import time
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, Form, Header, Request, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from . import imgio
from .errors import GuidanceDivergenceError
from .sampler import EditParams, run_edit
from .toyzoo.bundle import ModelBundle, load_bundle

DEFAULT_MAX_IMAGE_BYTES = 1 << 20
DEFAULT_QUEUE_CAP = 64

TERMINAL = ("done", "failed", "no-op-mask")

EDIT_PARAMS_SCHEMA = {
    "$id": "region-edit/params",
    "type": "object",
    "properties": {
        "steps": {"type": "integer", "minimum": 1, "maximum": 2000, "default": 100},
        "threshold": {"type": "integer", "minimum": 0, "maximum": 255, "default": 150},
        "seed": {"type": "integer", "default": 0},
        "codec": {"type": "string", "default": "toy"},
        "record_trajectory": {"type": "boolean", "default": True},
        "use_blend": {"type": "boolean", "default": True},
        "use_nerp": {"type": "boolean", "default": True},
        "guidance": {
            "type": "object",
            "properties": {
                "cfg_scale": {"type": "number", "minimum": 0, "default": 5.0},
                "grad_scale": {"type": "number", "minimum": 0, "default": 150.0},
                "lambda1": {"type": "number", "minimum": 0, "default": 0.5},
                "lambda2": {"type": "number", "minimum": 0, "default": 0.5},
            },
        },
        "t1": {"type": "string"},
        "t2": {"type": "string"},
    },
    "required": ["t1", "t2"],
}

EDIT_JOB_SCHEMA = {
    "$id": "region-edit/job",
    "type": "object",
    "properties": {
        "id": {"type": "string"},
        "status": {"enum": list(("queued", "running") + TERMINAL)},
        "request": {"type": "object"},
        "result": {"type": ["string", "null"]},
        "progress": {"type": ["object", "null"]},
        "created_at": {"type": "number"},
        "finished_at": {"type": ["number", "null"]},
        "error": {"type": ["string", "null"]},
    },
    "required": ["id", "status", "request"],
}


def _atomic_write(path: Path, data) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}.{threading.get_ident()}")
    if isinstance(data, bytes):
        tmp.write_bytes(data)
    else:
        tmp.write_text(data)
    os.replace(tmp, path)


def validate_edit_request(rec: dict) -> tuple:
    """(params or None, list of field-level errors)."""
    errors = []

    def bad(fieldname, message):
        errors.append({"field": fieldname, "message": message})

    def num(name, lo, hi, default, integer=False, src=None):
        src = rec if src is None else src
        raw = src.get(name, default)
        try:
            val = int(raw) if integer else float(raw)
        except (TypeError, ValueError):
            bad(name, f"must be a number, got {raw!r}")
            return default
        if not lo <= val <= hi:
            bad(name, f"must be in [{lo}, {hi}], got {val}")
            return default
        return val

    for fieldname in ("t1", "t2"):
        if not isinstance(rec.get(fieldname), str) or not rec.get(fieldname).strip():
            bad(fieldname, "required non-empty string")

    steps = num("steps", 1, 2000, 100, integer=True)
    threshold = num("threshold", 0, 255, 150, integer=True)
    seed = num("seed", -(2**62), 2**62, 0, integer=True)
    g = rec.get("guidance", {})
    if not isinstance(g, dict):
        bad("guidance", "must be an object")
        g = {}
    cfg_scale = num("cfg_scale", 0, 1e6, 5.0, src=g)
    grad_scale = num("grad_scale", 0, 1e6, 150.0, src=g)
    lambda1 = num("lambda1", 0, 1e6, 0.5, src=g)
    lambda2 = num("lambda2", 0, 1e6, 0.5, src=g)
    codec = rec.get("codec", "toy")
    if codec not in ("toy", "identity") and not str(codec).startswith("external:"):
        bad("codec", f"must be 'toy', 'identity', or 'external:<path>', got {codec!r}")
    if errors:
        return None, errors
    params = EditParams.from_json(
        {
            "steps": steps,
            "threshold": threshold,
            "seed": seed,
            "codec": codec,
            "record_trajectory": bool(rec.get("record_trajectory", True)),
            "use_blend": bool(rec.get("use_blend", True)),
            "use_nerp": bool(rec.get("use_nerp", True)),
            "guidance": {
                "cfg_scale": cfg_scale,
                "grad_scale": grad_scale,
                "lambda1": lambda1,
                "lambda2": lambda2,
            },
        }
    )
    return params, []


class JobStore:
    """Directory-backed job records with atomic updates."""

    def __init__(self, data_dir):
        self.root = Path(data_dir)
        self.jobs_dir = self.root / "jobs"
        self.jobs_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._idem_path = self.root / "idempotency.json"
        self._idem = {}
        if self._idem_path.exists():
            self._idem = json.loads(self._idem_path.read_text())

    def job_dir(self, job_id: str) -> Path:
        return self.jobs_dir / job_id

    def create(self, request: dict, image_png: bytes, idem_key=None) -> str:
        with self._lock:
            if idem_key is not None and idem_key in self._idem:
                return self._idem[idem_key]
            job_id = uuid.uuid4().hex[:16]
            jdir = self.job_dir(job_id)
            jdir.mkdir(parents=True)
            _atomic_write(jdir / "input.png", image_png)
            _atomic_write(jdir / "request.json", json.dumps(request, indent=2))
            self._write_status(
                job_id,
                {
                    "id": job_id,
                    "status": "queued",
                    "request": request,
                    "result": None,
                    "progress": None,
                    "created_at": time.time(),
                    "finished_at": None,
                    "error": None,
                },
            )
            if idem_key is not None:
                self._idem[idem_key] = job_id
                _atomic_write(self._idem_path, json.dumps(self._idem))
            return job_id

    def _write_status(self, job_id: str, payload: dict) -> None:
        _atomic_write(self.job_dir(job_id) / "status.json", json.dumps(payload, indent=2))

    def read(self, job_id: str):
        path = self.job_dir(job_id) / "status.json"
        if not path.exists():
            return None
        return json.loads(path.read_text())

    def update(self, job_id: str, **changes) -> dict:
        with self._lock:
            payload = self.read(job_id)
            payload.update(changes)
            self._write_status(job_id, payload)
            return payload

    def running_count(self) -> int:
        return sum(1 for j in self.all_jobs() if j["status"] == "running")

    def all_jobs(self) -> list:
        out = []
        for jdir in sorted(self.jobs_dir.iterdir()):
            payload = self.read(jdir.name)
            if payload is not None:
                out.append(payload)
        return out

    def recover(self) -> None:
        """Mark jobs interrupted by a crash/restart as failed."""
        for job in self.all_jobs():
            if job["status"] not in TERMINAL:
                self.update(
                    job["id"],
                    status="failed",
                    error="interrupted by service restart",
                    finished_at=time.time(),
                )


class EditWorker(threading.Thread):
    def __init__(self, store: JobStore, jobs: "queue.Queue", bundle: ModelBundle):
        super().__init__(daemon=True)
        self.store = store
        self.jobs = jobs
        self.bundle = bundle
        self._stop = threading.Event()

    def stop(self) -> None:
        self._stop.set()

    def run(self) -> None:
        while not self._stop.is_set():
            try:
                job_id = self.jobs.get(timeout=0.1)
            except queue.Empty:
                continue
            if job_id is None:
                break
            try:
                self._execute(job_id)
            except Exception as err:  # noqa: BLE001 - job must reach a terminal state
                self.store.update(
                    job_id, status="failed", error=str(err), finished_at=time.time()
                )
            finally:
                self.jobs.task_done()

    def _execute(self, job_id: str) -> None:
        record = self.store.read(job_id)
        request = record["request"]
        params, errs = validate_edit_request(request)
        if errs:
            raise ValueError(f"invalid request on disk: {errs}")
        jdir = self.store.job_dir(job_id)
        x0 = imgio.load_image_png(jdir / "input.png")
        self.store.update(job_id, status="running")

        def progress(step, clip_loss, nerp_loss):
            self.store.update(
                job_id,
                progress={
                    "step": int(params.steps - step + 1),
                    "total": int(params.steps),
                    "t": int(step),
                    "clip_loss": clip_loss,
                    "nerp_loss": nerp_loss,
                },
            )

        try:
            result = run_edit(x0, request["t1"], request["t2"], params, self.bundle, progress_cb=progress)
        except GuidanceDivergenceError as err:
            self.store.update(
                job_id,
                status="failed",
                error=f"guidance divergence at step {err.step}: {err}",
                finished_at=time.time(),
            )
            return
        _atomic_write(jdir / "result.png", imgio.image_png_bytes(result.image))
        _atomic_write(jdir / "mask.png", imgio.mask_png_bytes(result.mask))
        _atomic_write(jdir / "soft_mask.png", imgio.soft_png_bytes(result.soft_mask))
        _atomic_write(jdir / "trace.jsonl", result.trace_jsonl())
        self.store.update(
            job_id,
            status="no-op-mask" if result.no_op_mask else "done",
            result="result.png",
            finished_at=time.time(),
            progress={
                "step": int(params.steps),
                "total": int(params.steps),
                "t": 0,
                "clip_loss": result.trace[-1]["clip_loss"] if result.trace else None,
                "nerp_loss": result.trace[-1]["nerp_loss"] if result.trace else None,
            },
        )


def create_app(
    bundle: ModelBundle | None = None,
    bundle_path=None,
    data_dir=None,
    max_image_bytes: int | None = None,
    queue_cap: int | None = None,
    workers: int = 1,
    studio_dir=None,
) -> FastAPI:
    data_dir = Path(data_dir or os.environ.get("REGION_EDIT_DATA_DIR", "./region-edit-data"))
    if bundle is None:
        bundle_path = bundle_path or os.environ.get("REGION_EDIT_BUNDLE")
        if bundle_path is None:
            raise ValueError("either a bundle object or a bundle path is required")
        bundle = load_bundle(bundle_path)
    max_image_bytes = max_image_bytes or int(
        os.environ.get("REGION_EDIT_MAX_IMAGE_BYTES", DEFAULT_MAX_IMAGE_BYTES)
    )
    queue_cap = queue_cap or DEFAULT_QUEUE_CAP

    store = JobStore(data_dir)
    store.recover()
    job_queue: "queue.Queue" = queue.Queue(maxsize=queue_cap)

    @contextlib.asynccontextmanager
    async def lifespan(app: FastAPI):
        pool = [EditWorker(store, job_queue, bundle) for _ in range(workers)]
        for w in pool:
            w.start()
        app.state.workers = pool
        yield
        for w in pool:
            w.stop()
        for w in pool:
            w.join(timeout=10)

    app = FastAPI(title="region-edit service", lifespan=lifespan)
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    app.state.store = store
    app.state.bundle = bundle

    def err(status_code: int, detail) -> JSONResponse:
        return JSONResponse(status_code=status_code, content={"detail": detail})

    _enqueued: set = set()
    _enq_lock = threading.Lock()

    def _is_enqueued(job_id: str) -> bool:
        with _enq_lock:
            return job_id in _enqueued

    def _mark_enqueued(job_id: str) -> None:
        with _enq_lock:
            _enqueued.add(job_id)

    @app.post("/v1/jobs", status_code=202)
    async def submit_job(
        request: Request,
        image: UploadFile = File(...),
        params: str = Form("{}"),
        idempotency_key: str | None = Header(default=None, alias="Idempotency-Key"),
    ):
        raw = await image.read()
        if len(raw) > max_image_bytes:
            return err(413, f"image exceeds the {max_image_bytes}-byte cap")
        try:
            rec = json.loads(params)
        except json.JSONDecodeError as exc:
            return err(400, [{"field": "params", "message": f"invalid JSON: {exc}"}])
        _, errors = validate_edit_request(rec)
        try:
            x0 = imgio.load_image_png(raw)
            size = bundle.image_size
            if tuple(x0.shape) != (size, size, 3):
                errors.append(
                    {"field": "image", "message": f"expected {size}x{size} RGB PNG, got {tuple(x0.shape)}"}
                )
        except Exception:
            errors.append({"field": "image", "message": "not a decodable PNG"})
        if errors:
            return err(400, errors)
        if job_queue.full():
            return err(503, "job queue is full, retry later")
        job_id = store.create(rec, raw, idem_key=idempotency_key)
        status = store.read(job_id)["status"]
        if status == "queued" and not _is_enqueued(job_id):
            try:
                job_queue.put_nowait(job_id)
                _mark_enqueued(job_id)
            except queue.Full:
                store.update(
                    job_id, status="failed", error="job queue full", finished_at=time.time()
                )
                return err(503, "job queue is full, retry later")
        return {"job_id": job_id}

    @app.get("/v1/jobs/{job_id}")
    def get_job(job_id: str):
        payload = store.read(job_id)
        if payload is None:
            return err(404, f"unknown job {job_id!r}")
        return payload

    @app.get("/v1/jobs/{job_id}/result")
    def get_result(job_id: str):
        payload = store.read(job_id)
        if payload is None:
            return err(404, f"unknown job {job_id!r}")
        if payload["status"] == "failed":
            return err(409, f"job failed: {payload.get('error')}")
        if payload["status"] not in TERMINAL:
            return err(404, f"job is {payload['status']}; result not ready")
        png = (store.job_dir(job_id) / "result.png").read_bytes()
        return Response(content=png, media_type="image/png")

    @app.get("/v1/jobs/{job_id}/trace")
    def get_trace(job_id: str):
        payload = store.read(job_id)
        if payload is None:
            return err(404, f"unknown job {job_id!r}")
        path = store.job_dir(job_id) / "trace.jsonl"
        if not path.exists():
            return err(404, "trace not available")
        return Response(content=path.read_bytes(), media_type="application/jsonl")

    @app.post("/v1/mask/preview")
    async def mask_preview(
        image: UploadFile = File(...),
        pos_text: str = Form(...),
        threshold: int = Form(150),
    ):
        raw = await image.read()
        if len(raw) > max_image_bytes:
            return err(413, f"image exceeds the {max_image_bytes}-byte cap")
        if not 0 <= threshold <= 255:
            return err(400, [{"field": "threshold", "message": f"must be in [0, 255], got {threshold}"}])
        try:
            x0 = imgio.load_image_png(raw)
        except Exception:
            return err(400, [{"field": "image", "message": "not a decodable PNG"}])
        size = bundle.image_size
        if tuple(x0.shape) != (size, size, 3):
            return err(400, [{"field": "image", "message": f"expected {size}x{size} RGB PNG"}])
        soft = bundle.segmenter.soft_mask(x0, pos_text)
        mask = (soft >= threshold).astype(np.uint8)
        return {
            "soft_mask_png": base64.b64encode(imgio.soft_png_bytes(soft)).decode(),
            "binary_mask_png": base64.b64encode(imgio.mask_png_bytes(mask)).decode(),
            "area_fraction": float(mask.mean()),
        }

    @app.get("/v1/schema")
    def schema():
        return {"edit_params": EDIT_PARAMS_SCHEMA, "edit_job": EDIT_JOB_SCHEMA}

    if studio_dir is not None and Path(studio_dir).exists():
        app.mount("/studio", StaticFiles(directory=studio_dir, html=True), name="studio")

    return app


def serve(app: FastAPI, port: int | None = None) -> None:
    import uvicorn

    port = port or int(os.environ.get("REGION_EDIT_PORT", 8765))
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="info")

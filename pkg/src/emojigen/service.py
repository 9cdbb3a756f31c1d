"""HTTP job service wrapping the shared pipeline.

Endpoint table (all request/response bodies are JSON unless noted):

    GET  /api/health                      -> {status, checkpoints: {name: id|null}}
    POST /api/generate                    {caption, seed?, batch?, top_k?, top_p?, temperature?}
                                          -> {job_id}; 503 when checkpoints missing
    POST /api/segment                     {image, threshold?} -> {job_id}; image is a
                                          run-dir-relative PNG path from a previous job
    POST /api/export                      {name, images: [path, ...]} -> {job_id}
    GET  /api/jobs/{job_id}               -> job record; 404 for unknown ids
    GET  /api/images/{path}               -> PNG bytes (only under generated/ or packs/)
    GET  /api/packs/{name}.zip            -> archive of packs/<name>/ (application/zip)

Malformed requests return 400 with field-level messages. Results embed
`files: [{path, sha256}]`; every listed artifact exists on disk.
"""

from __future__ import annotations

import io
import os
import zipfile
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, Field

from . import pipeline, sampler
from .jobs import JobRunner, JobStore


class GenerateRequest(BaseModel):
    caption: str = Field(min_length=1)
    seed: int = 42
    batch: int = Field(default=16, ge=1, le=64)
    top_k: int = Field(default=2048, ge=1)
    top_p: float = Field(default=0.995, gt=0.0, le=1.0)
    temperature: float = Field(default=1.0, gt=0.0)


class SegmentRequest(BaseModel):
    image: str = Field(min_length=1)
    threshold: float = Field(default=0.99, ge=0.0, le=1.0)


class ExportRequest(BaseModel):
    name: str = Field(min_length=1, max_length=64)
    images: list[str] = Field(min_length=1)


def _safe_artifact(paths: pipeline.RunPaths, rel: str) -> Path | None:
    """Resolve a run-dir-relative path, refusing traversal and odd suffixes."""
    candidate = (paths.root / rel).resolve()
    root = paths.root.resolve()
    for base in (paths.generated, paths.packs):
        if candidate.is_relative_to(base.resolve()) and candidate.suffix == ".png":
            return candidate if candidate.is_file() else None
    if candidate.is_relative_to(root) and candidate.suffix == ".png":
        return candidate if candidate.is_file() else None
    return None


def create_app(run_dir: str | None = None, workers: int | None = None) -> FastAPI:
    paths = pipeline.resolve_run_dir(run_dir)
    store = JobStore(paths.jobs_journal)
    handlers = {
        "generate": lambda p: pipeline.generate(
            paths, p["caption"],
            sampler.SamplingConfig(seed=p["seed"], batch=p["batch"], top_k=p["top_k"],
                                   top_p=p["top_p"], temperature=p["temperature"])),
        "segment": lambda p: pipeline.segment_image(paths, p["image"], p["threshold"]),
        "export": lambda p: pipeline.export_pack(paths, p["name"], p["images"]),
    }
    runner = JobRunner(store, handlers, workers=workers or max(os.cpu_count() or 2, 2))
    runner.start()

    app = FastAPI(title="emojigen service")
    app.state.paths = paths
    app.state.runner = runner
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"],
    )

    @app.exception_handler(RequestValidationError)
    async def validation_handler(_request: Request, exc: RequestValidationError):
        errors = [
            {"field": ".".join(str(part) for part in err["loc"] if part != "body"),
             "message": err["msg"]}
            for err in exc.errors()
        ]
        return JSONResponse(status_code=400, content={"errors": errors})

    @app.get("/api/health")
    def get_health():
        return pipeline.health(paths)

    @app.post("/api/generate", status_code=202)
    def post_generate(req: GenerateRequest):
        report = pipeline.health(paths)
        if report["status"] != "ok":
            missing = [k for k in ("codec", "lm_finetuned", "vocab") if not report["checkpoints"][k]]
            return JSONResponse(status_code=503, content={"error": f"checkpoints missing: {missing}"})
        job = runner.submit("generate", req.model_dump())
        return {"job_id": job.id}

    @app.post("/api/segment", status_code=202)
    def post_segment(req: SegmentRequest):
        if _safe_artifact(paths, req.image) is None:
            return JSONResponse(status_code=404, content={"error": f"unknown image {req.image!r}"})
        job = runner.submit("segment", req.model_dump())
        return {"job_id": job.id}

    @app.post("/api/export", status_code=202)
    def post_export(req: ExportRequest):
        if any(sep in req.name for sep in ("/", "\\", "..")):
            return JSONResponse(status_code=400,
                                content={"errors": [{"field": "name", "message": "no path separators"}]})
        for ref in req.images:
            if _safe_artifact(paths, ref) is None:
                return JSONResponse(status_code=404, content={"error": f"unknown image {ref!r}"})
        job = runner.submit("export", req.model_dump())
        return {"job_id": job.id}

    @app.get("/api/jobs/{job_id}")
    def get_job(job_id: str):
        job = store.get(job_id)
        if job is None:
            return JSONResponse(status_code=404, content={"error": f"unknown job {job_id!r}"})
        return job.as_dict()

    @app.get("/api/images/{rel:path}")
    def get_image(rel: str):
        path = _safe_artifact(paths, rel)
        if path is None:
            return JSONResponse(status_code=404, content={"error": f"unknown image {rel!r}"})
        return Response(content=path.read_bytes(), media_type="image/png")

    @app.get("/api/packs/{name}.zip")
    def get_pack(name: str):
        pack_dir = paths.packs / name
        if any(sep in name for sep in ("/", "\\", "..")) or not pack_dir.is_dir():
            return JSONResponse(status_code=404, content={"error": f"unknown pack {name!r}"})
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
            for p in sorted(pack_dir.iterdir()):
                if p.is_file():
                    zf.write(p, arcname=f"{name}/{p.name}")
        return Response(
            content=buf.getvalue(),
            media_type="application/zip",
            headers={"Content-Disposition": f'attachment; filename="{name}.zip"'},
        )

    return app


def serve(run_dir: str | None, host: str = "127.0.0.1", port: int = 8715) -> None:
    import uvicorn

    uvicorn.run(create_app(run_dir), host=host, port=port, log_level="info")

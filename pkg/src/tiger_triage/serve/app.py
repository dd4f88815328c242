"""HTTP inference service: classify uploaded images with a saved checkpoint."""

from __future__ import annotations

import asyncio
import base64
import io
import os
import threading
import time
from dataclasses import dataclass

import torch
from fastapi import FastAPI, File, Query, UploadFile
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError

from ..dataset import CLASS_NAMES
from ..errors import TriageError
from ..gradcam import gradcam, upsample_overlay
from ..model import ClassifierNet, forward, load_checkpoint
from ..preprocess import NormStats, apply_norm, load_resized
from .schemas import ClassificationResponse, HealthResponse

MAX_UPLOAD_BYTES = 10 * 1024 * 1024
CHECKPOINT_ENV = "TIGER_TRIAGE_CHECKPOINT"


@dataclass
class LoadedModel:
    net: ClassifierNet
    stats: NormStats
    model_hash: str
    cam_slots: threading.BoundedSemaphore


def load_model(app: FastAPI, checkpoint, cam_workers: int = 2) -> LoadedModel:
    ckpt = load_checkpoint(checkpoint)
    ckpt.net.eval()
    state = LoadedModel(ckpt.net, ckpt.norm_stats, ckpt.meta["model_hash"],
                        threading.BoundedSemaphore(cam_workers))
    app.state.model = state
    return state


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": code, "message": message})


def classify_bytes(state: LoadedModel, data: bytes, explain: bool = False) -> dict:
    """Same preprocessing as training: decode, resize, normalize with stored stats."""
    raw = load_resized(data, state.net.input_size)
    x = apply_norm(raw, state.stats)
    batch = torch.from_numpy(x.data)[None]
    probs = forward(state.net, batch)[0]
    c = 1 if float(probs[1]) > float(probs[0]) else 0
    out = {"class": CLASS_NAMES[c], "probability": float(probs[c]),
           "model_hash": state.model_hash}
    if explain:
        with state.cam_slots:
            hm = gradcam(state.net, batch, "deep", c)
        buf = io.BytesIO()
        Image.fromarray(upsample_overlay(hm, raw)).save(buf, format="PNG")
        out["heatmap_png"] = base64.b64encode(buf.getvalue()).decode("ascii")
    return out


def create_app(checkpoint=None, *, timeout: float = 30.0, max_bytes: int = MAX_UPLOAD_BYTES,
               cam_workers: int = 2) -> FastAPI:
    app = FastAPI(title="tiger-triage", version="0.1.0")
    app.state.model = None
    app.state.started = time.monotonic()
    checkpoint = checkpoint or os.environ.get(CHECKPOINT_ENV)
    if checkpoint:
        load_model(app, checkpoint, cam_workers)

    @app.get("/healthz", response_model=HealthResponse)
    def healthz():
        state = app.state.model
        uptime = time.monotonic() - app.state.started
        if state is None:
            return JSONResponse(status_code=503, content={"status": "model_not_loaded",
                                                          "model_hash": None, "uptime": uptime})
        return HealthResponse(status="ok", model_hash=state.model_hash, uptime=uptime)

    @app.post("/classify", response_model=ClassificationResponse,
              response_model_exclude_none=True, response_model_by_alias=True)
    async def classify(file: UploadFile = File(...), explain: bool = Query(False)):
        state = app.state.model
        if state is None:
            return _error(503, "ModelNotLoaded", "no checkpoint is loaded")
        data = await file.read(max_bytes + 1)
        if len(data) > max_bytes:
            return _error(413, "TooLarge", f"upload exceeds {max_bytes} bytes")
        try:
            result = await asyncio.wait_for(
                run_in_threadpool(classify_bytes, state, data, explain), timeout)
        except (UnidentifiedImageError, OSError, ValueError, TriageError) as exc:
            return _error(400, "UndecodableImage", f"could not decode image: {exc}")
        except asyncio.TimeoutError:
            return _error(504, "Timeout", f"classification exceeded {timeout} s")
        return ClassificationResponse(**result)

    return app

"""HTTP inference service: prediction, model metadata, and persistent
what-if session storage for the planner frontend.

Weights are immutable after load, so predict requests run concurrently;
the session store serializes appends behind a lock and survives restarts.
"""

from __future__ import annotations

import base64
import io
import json
import threading
import time
import uuid
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, HTTPException
from PIL import Image
from pydantic import BaseModel

from .data import LABEL_TOLERANCE
from .pipeline import ModelBundle, load_bundle, sample_batch
from .schedule import NOISE_COEF_VARIANTS

Tensor = torch.Tensor


class PredictRequest(BaseModel):
    pre_image: str  # base64 PNG
    change_map: str  # base64 PNG, binary within +-LABEL_TOLERANCE of {0, 255}
    seed: int | None = None
    sampler_variant: str | None = None
    session_id: str | None = None


class PredictResponse(BaseModel):
    post_image: str
    latency_ms: float
    seed_used: int
    session_entry_id: str


class SessionStore:
    """Append-only per-session entry files plus an index manifest."""

    def __init__(self, root: str | Path, retention: int = 100):
        self.root = Path(root)
        self.retention = retention
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _session_dir(self, session_id: str) -> Path:
        safe = "".join(c for c in session_id if c.isalnum() or c in "-_")
        if not safe:
            raise ValueError(f"invalid session id {session_id!r}")
        return self.root / safe

    def append(self, session_id: str, record: dict) -> str:
        entry_id = f"{time.time_ns():020d}-{uuid.uuid4().hex[:8]}"
        record = dict(record, entry_id=entry_id, timestamp=time.time())
        with self._lock:
            sdir = self._session_dir(session_id)
            sdir.mkdir(parents=True, exist_ok=True)
            (sdir / f"{entry_id}.json").write_text(json.dumps(record))
            index_path = sdir / "index.json"
            index = json.loads(index_path.read_text()) if index_path.is_file() else []
            index.append(entry_id)
            index_path.write_text(json.dumps(index))
        return entry_id

    def entries(self, session_id: str) -> list[dict]:
        """Stored entries, newest first, capped at the retention limit."""
        sdir = self._session_dir(session_id)
        index_path = sdir / "index.json"
        if not index_path.is_file():
            raise KeyError(session_id)
        index = json.loads(index_path.read_text())
        out = []
        for entry_id in reversed(index[-self.retention :]):
            path = sdir / f"{entry_id}.json"
            if path.is_file():
                out.append(json.loads(path.read_text()))
        return out


def _decode_png(b64_data: str, what: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64_data, validate=True)
        with Image.open(io.BytesIO(raw)) as img:
            return np.asarray(img.convert("RGB"))
    except HTTPException:
        raise
    except Exception as exc:
        raise HTTPException(status_code=400, detail=f"{what}: not a decodable PNG ({exc})") from exc


def _encode_png(image: Tensor) -> str:
    arr = ((image.permute(1, 2, 0).numpy() + 1.0) * 127.5).round().clip(0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _mask_from_array(arr: np.ndarray) -> Tensor:
    gray = arr.astype(np.int16).mean(axis=2).round().astype(np.int16)
    ambiguous = (gray > LABEL_TOLERANCE) & (gray < 255 - LABEL_TOLERANCE)
    if bool(ambiguous.any()):
        bad = int(gray[ambiguous].flat[0])
        raise HTTPException(
            status_code=400,
            detail=f"change_map: non-binary pixel value {bad} "
            f"(must be within +-{LABEL_TOLERANCE} of 0 or 255)",
        )
    return torch.from_numpy((gray >= 128).astype(np.float32)).unsqueeze(0)


def create_app(
    checkpoint: str | Path | None = None,
    sessions_dir: str | Path = "sessions",
    retention: int = 100,
) -> FastAPI:
    app = FastAPI(title="updiff inference service")
    app.state.bundle = None
    app.state.sessions = SessionStore(sessions_dir, retention=retention)

    if checkpoint is not None:
        app.state.bundle = load_bundle(checkpoint)

    def require_bundle() -> ModelBundle:
        bundle = app.state.bundle
        if bundle is None:
            raise HTTPException(status_code=503, detail="model not loaded")
        return bundle

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok" if app.state.bundle is not None else "loading"}

    @app.get("/model-info")
    def model_info() -> dict:
        bundle = require_bundle()
        m = bundle.manifest
        return {
            "checkpoint_id": m["checkpoint_id"],
            "T": m["schedule"]["T"],
            "resolution": m["resolution"],
            "f": m["f"],
            "s": m["s"],
        }

    @app.get("/sessions/{session_id}")
    def session_entries(session_id: str) -> list[dict]:
        try:
            return app.state.sessions.entries(session_id)
        except (KeyError, ValueError):
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")

    @app.post("/predict", response_model=PredictResponse)
    def predict(request: PredictRequest) -> PredictResponse:
        bundle = require_bundle()
        start = time.perf_counter()
        pre_arr = _decode_png(request.pre_image, "pre_image")
        map_arr = _decode_png(request.change_map, "change_map")
        if pre_arr.shape[:2] != map_arr.shape[:2]:
            raise HTTPException(
                status_code=400,
                detail=f"image dimensions {pre_arr.shape[:2]} != change map {map_arr.shape[:2]}",
            )
        h, w = pre_arr.shape[:2]
        f = bundle.config.autoencoder.downscale
        s = bundle.config.conditioning.stride
        if h % f or w % f or h % s or w % s:
            raise HTTPException(
                status_code=422,
                detail=f"image dimensions ({h}, {w}) must be divisible by the latent factor {f} "
                f"and the layout stride {s}",
            )
        variant = request.sampler_variant or "beta"
        if variant not in NOISE_COEF_VARIANTS:
            raise HTTPException(
                status_code=400, detail=f"sampler_variant must be one of {NOISE_COEF_VARIANTS}"
            )
        mask = _mask_from_array(map_arr)
        pre = torch.from_numpy(pre_arr.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1)
        seed = request.seed if request.seed is not None else int(torch.randint(0, 2**31, ()))
        out = sample_batch(pre, mask, bundle, seed=seed, sampler_variant=variant)
        post_b64 = _encode_png(out)
        latency_ms = (time.perf_counter() - start) * 1000.0
        session_id = request.session_id or "default"
        entry_id = app.state.sessions.append(
            session_id,
            {
                "session_id": session_id,
                "pre_image": request.pre_image,
                "change_map": request.change_map,
                "post_image": post_b64,
                "seed_used": seed,
                "sampler_variant": variant,
                "latency_ms": latency_ms,
            },
        )
        return PredictResponse(
            post_image=post_b64,
            latency_ms=latency_ms,
            seed_used=seed,
            session_entry_id=entry_id,
        )

    return app

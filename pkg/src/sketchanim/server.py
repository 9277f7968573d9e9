"""HTTP inference service.

Stateless per request: the checkpoint is loaded once and never mutated;
weight overrides travel inside each request's condition bundle. Instance
images are registered through POST /instances and referenced from canvas
placements by id.
"""

from __future__ import annotations

import base64
import io
import logging
import threading
import time
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, HTTPException, Request, UploadFile
from fastapi.responses import Response
from PIL import Image
from pydantic import BaseModel, Field, ValidationError

from .backbone import Denoiser, build_conditions, load_checkpoint, sample
from .canvas import CanvasSpec, InstanceImage, InstanceSet, Placement, compose
from .latent_codec import PixelVideo

logger = logging.getLogger("sketchanim.server")


class PlacementDoc(BaseModel):
    instance_id: str
    x: int
    y: int
    scale: float = Field(default=1.0, gt=0)
    z_order: int = 0


class CanvasDoc(BaseModel):
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    background_path: str | None = None
    placements: list[PlacementDoc] = Field(default_factory=list)


class WeightOverridesDoc(BaseModel):
    bg: float | None = Field(default=None, ge=0)
    text: float | None = Field(default=None, ge=0)
    inst: dict[int, float] = Field(default_factory=dict)


class InferPayload(BaseModel):
    canvas: CanvasDoc
    sketches: list[str] | None = None  # base64 PNG frames
    sketch_clip_path: str | None = None
    caption: str = ""
    weight_overrides: WeightOverridesDoc | None = None
    seed: int = 0
    steps: int = Field(default=50, ge=1)


def _png_to_array(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data)).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def _array_to_png(array: np.ndarray) -> bytes:
    arr = np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _bad_request(field: str, message: str):
    return HTTPException(status_code=400, detail=[{"field": field, "error": message}])


class InstanceStore:
    """Uploaded reference instances; registration is single-writer guarded."""

    def __init__(self):
        self._items: dict[str, InstanceImage] = {}
        self._lock = threading.Lock()
        self._counter = 0

    def register(self, instance: InstanceImage) -> str:
        with self._lock:
            self._counter += 1
            instance_id = f"up{self._counter}"
            self._items[instance_id] = instance
        return instance_id

    def get(self, instance_id: str) -> InstanceImage | None:
        return self._items.get(instance_id)


def create_app(checkpoint_path=None, model: Denoiser | None = None, model_version: str | None = None) -> FastAPI:
    if model is None:
        if checkpoint_path is None:
            raise ValueError("need a checkpoint path or a model")
        model, meta = load_checkpoint(checkpoint_path)
        model_version = model_version or f"v{meta['version']}-step{meta['step']}"
    model.eval()
    version = model_version or "v1-unsaved"

    app = FastAPI(title="sketchanim inference service")
    app.state.model = model
    app.state.store = InstanceStore()
    app.state.model_version = version

    @app.get("/health")
    def health():
        return {"status": "ok", "model_version": app.state.model_version}

    @app.get("/weights")
    def weights():
        w = app.state.model.weight_store
        return {
            "bg": w.bg_weight.item(),
            "text": w.text_weight.item(),
            "inst": [v.item() for v in w.instance_weights],
        }

    @app.post("/instances")
    async def upload_instance(file: UploadFile = File(...), mask: UploadFile | None = File(None)):
        image = _png_to_array(await file.read())
        mask_arr = None
        if mask is not None:
            raw = np.asarray(Image.open(io.BytesIO(await mask.read())).convert("L"))
            if raw.shape != image.shape[:2]:
                raise _bad_request("mask", f"mask {raw.shape} does not match image {image.shape[:2]}")
            mask_arr = raw > 127
        instance_id = app.state.store.register(InstanceImage(image=image, mask=mask_arr))
        return {"instance_id": instance_id}

    @app.post("/compose")
    async def compose_endpoint(request: Request, format: str = "png"):
        """Test-support endpoint: the composite the model would be
        conditioned on, as PNG or raw bytes for pixel-exact comparison."""
        raw = await request.json()
        try:
            doc = CanvasDoc.model_validate(raw)
        except ValidationError as exc:
            raise _validation_to_400(exc, prefix="")
        spec, instances = _resolve_canvas(app, doc, field_prefix="")
        composite = compose(spec, instances)
        if format == "raw":
            data = np.round(np.clip(composite, 0.0, 1.0) * 255.0).astype(np.uint8)
            return Response(
                content=data.tobytes(),
                media_type="application/octet-stream",
                headers={"X-Width": str(spec.width), "X-Height": str(spec.height)},
            )
        return Response(content=_array_to_png(composite), media_type="image/png")

    @app.post("/infer")
    async def infer(request: Request):
        started = time.monotonic()
        raw = await request.json()
        try:
            payload = InferPayload.model_validate(raw)
        except ValidationError as exc:
            raise _validation_to_400(exc, prefix="")
        mdl: Denoiser = app.state.model
        cfg = mdl.config

        spec, instances = _resolve_canvas(app, payload.canvas, field_prefix="canvas.")
        if (spec.width, spec.height) != (cfg.width, cfg.height):
            raise _bad_request(
                "canvas.width",
                f"canvas {spec.width}x{spec.height} does not match model "
                f"{cfg.width}x{cfg.height}",
            )
        sketches = _resolve_sketches(payload, cfg)
        overrides = _overrides_dict(payload.weight_overrides, len(spec.placements))

        try:
            cond = build_conditions(
                mdl, spec, instances, sketches, payload.caption, weight_overrides=overrides
            )
            video = sample(
                mdl,
                cond,
                sketches.frames.shape[0],
                seed=payload.seed,
                num_steps=payload.steps,
            )
        except ValueError as exc:
            raise _bad_request("canvas", str(exc))
        except Exception:
            error_id = uuid.uuid4().hex
            logger.exception("inference failed (error_id=%s)", error_id)
            raise HTTPException(status_code=500, detail={"error_id": error_id})

        frames_b64 = [
            base64.b64encode(_array_to_png(f)).decode("ascii") for f in video.frames
        ]
        return {
            "frames": frames_b64,
            "request": raw,
            "timing_ms": round((time.monotonic() - started) * 1000.0, 3),
            "model_version": app.state.model_version,
            "instance_groups": len(spec.placements),
        }

    return app


def _validation_to_400(exc: ValidationError, prefix: str):
    detail = [
        {"field": prefix + ".".join(str(p) for p in err["loc"]), "error": err["msg"]}
        for err in exc.errors()
    ]
    return HTTPException(status_code=400, detail=detail)


def _resolve_canvas(app, doc: CanvasDoc, field_prefix: str):
    store: InstanceStore = app.state.store
    instances = InstanceSet()
    placements = []
    for i, p in enumerate(doc.placements):
        inst = store.get(p.instance_id)
        if inst is None:
            raise _bad_request(
                f"{field_prefix}placements[{i}].instance_id",
                f"unknown instance id {p.instance_id!r}",
            )
        instances.add(p.instance_id, inst)
        placements.append(
            Placement(instance_id=p.instance_id, x=p.x, y=p.y, scale=p.scale, z_order=p.z_order)
        )
    background = None
    if doc.background_path:
        background = _load_background(app, doc.background_path, field_prefix)
        if background.shape[:2] != (doc.height, doc.width):
            raise _bad_request(
                f"{field_prefix}background_path",
                f"background {background.shape[:2]} does not match canvas "
                f"({doc.height}, {doc.width})",
            )
    spec = CanvasSpec(
        width=doc.width, height=doc.height, placements=placements, background=background
    )
    return spec, instances


def _load_background(app, path: str, field_prefix: str) -> np.ndarray:
    if path.startswith("upload:"):
        inst = app.state.store.get(path[len("upload:") :])
        if inst is None:
            raise _bad_request(f"{field_prefix}background_path", f"unknown upload {path!r}")
        return inst.image
    file_path = Path(path)
    if not file_path.exists():
        raise _bad_request(f"{field_prefix}background_path", f"no such file {path!r}")
    return _png_to_array(file_path.read_bytes())


def _resolve_sketches(payload: InferPayload, cfg) -> PixelVideo:
    if payload.sketches:
        try:
            frames = np.stack(
                [_png_to_array(base64.b64decode(s)) for s in payload.sketches]
            )
        except Exception:
            raise _bad_request("sketches", "frames must be base64-encoded PNG images")
    elif payload.sketch_clip_path:
        clip_dir = Path(payload.sketch_clip_path)
        paths = sorted(clip_dir.glob("*.png"))
        if not paths:
            raise _bad_request("sketch_clip_path", f"no PNG frames in {clip_dir}")
        frames = np.stack([_png_to_array(p.read_bytes()) for p in paths])
    else:
        raise _bad_request("sketches", "provide sketches or sketch_clip_path")
    if frames.shape[1:3] != (cfg.height, cfg.width):
        raise _bad_request(
            "sketches",
            f"sketch frames {frames.shape[1:3]} do not match model "
            f"({cfg.height}, {cfg.width})",
        )
    if frames.shape[0] > cfg.frames:
        raise _bad_request(
            "sketches", f"{frames.shape[0]} frames exceed model maximum {cfg.frames}"
        )
    return PixelVideo(frames=frames)


def _overrides_dict(doc: WeightOverridesDoc | None, num_instances: int) -> dict | None:
    if doc is None:
        return None
    overrides = {}
    if doc.bg is not None:
        overrides["bg"] = doc.bg
    if doc.text is not None:
        overrides["text"] = doc.text
    if doc.inst:
        for idx in doc.inst:
            if not 0 <= idx < num_instances:
                raise _bad_request(
                    f"weight_overrides.inst.{idx}",
                    f"index out of range for {num_instances} placements",
                )
        overrides["inst"] = dict(doc.inst)
    return overrides or None

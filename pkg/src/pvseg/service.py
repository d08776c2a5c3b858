"""Session-based HTTP inference service.

Endpoints (all under /v1):

- ``POST   /sessions``                          multipart PNG frame upload
  (field ``frames``) or a JSON dataset clip reference
  ``{"dataset_root": ..., "clip_id": ...}`` -> ``{id, n, h, w}``
- ``POST   /sessions/{sid}/objects/{o}/prompts``   body {frame, kind, payload};
  returns that frame's refreshed mask as RLE
- ``POST   /sessions/{sid}/objects/{o}/propagate`` body {from_frame}; re-runs
  memory-conditioned propagation from that frame with all accumulated
  prompts; returns every frame's mask as an RLE list
- ``GET    /sessions/{sid}/objects/{o}/masks/{t}`` -> RLE
- ``DELETE /sessions/{sid}``

Sessions are in-memory, evicted after 30 idle minutes.  Within a session,
mutating requests are serialized: a second concurrent writer gets 409.
Inference always uses deterministic (top_k) memory selection, so identical
prompt histories produce identical masks.
"""

from __future__ import annotations

import io
import json
import re
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
import torch
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from . import rle
from .data_synth import read_clip, read_manifest
from .model import ObjectTracker, PvsModel, propagate_video
from .prompting_decoding import Prompt, PromptValidationError

SESSION_IDLE_SECONDS = 30 * 60


@dataclass
class ObjectState:
    prompts: dict[int, list[Prompt]] = field(default_factory=dict)
    masks: np.ndarray | None = None  # [n, h, w] uint8

    @property
    def prompt_frame(self) -> int:
        return min(self.prompts) if self.prompts else 0


@dataclass
class Session:
    id: str
    video: np.ndarray  # [n, c, h, w] float32
    objects: dict[int, ObjectState] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)
    last_access: float = field(default_factory=time.monotonic)

    @property
    def shape(self) -> tuple[int, int, int]:
        n, _, h, w = self.video.shape
        return n, h, w

    def object(self, obj_id: int) -> ObjectState:
        if obj_id not in self.objects:
            n, h, w = self.shape
            self.objects[obj_id] = ObjectState(masks=np.zeros((n, h, w), dtype=np.uint8))
        return self.objects[obj_id]


def _decode_frames_from_uploads(blobs: list[bytes]) -> np.ndarray:
    from PIL import Image

    frames = []
    for blob in blobs:
        img = np.asarray(Image.open(io.BytesIO(blob)).convert("RGB"))
        frames.append(img)
    arr = np.stack(frames).astype(np.float32) / np.float32(255.0)
    return np.transpose(arr, (0, 3, 1, 2))


def _prompt_from_body(kind: str, payload: dict, frame: int, h: int, w: int) -> Prompt:
    """Validate and convert a wire prompt; raises HTTPException(422) with a
    field-level message on malformed input."""

    def fail(loc: str, msg: str):
        raise HTTPException(status_code=422, detail=[{"loc": ["payload", loc], "msg": msg}])

    if kind == "click":
        for key in ("x", "y"):
            if key not in payload or not isinstance(payload[key], (int, float)):
                fail(key, f"missing or non-numeric {key}")
        x, y = float(payload["x"]), float(payload["y"])
        if not (0 <= x < w):
            fail("x", f"x={x} out of bounds [0, {w})")
        if not (0 <= y < h):
            fail("y", f"y={y} out of bounds [0, {h})")
        polarity = payload.get("polarity", "positive")
        if polarity not in ("positive", "negative"):
            fail("polarity", f"unknown polarity {polarity!r}")
        return Prompt.click(x, y, polarity, frame)
    if kind == "box":
        coords = []
        for key in ("x0", "y0", "x1", "y1"):
            if key not in payload or not isinstance(payload[key], (int, float)):
                fail(key, f"missing or non-numeric {key}")
            coords.append(float(payload[key]))
        x0, y0, x1, y1 = coords
        if not (0 <= x0 <= x1 < w):
            fail("x0", f"box x range ({x0}, {x1}) out of bounds [0, {w})")
        if not (0 <= y0 <= y1 < h):
            fail("y0", f"box y range ({y0}, {y1}) out of bounds [0, {h})")
        return Prompt.from_box(x0, y0, x1, y1, frame)
    if kind == "mask":
        body = payload.get("rle")
        if not isinstance(body, dict):
            fail("rle", "mask prompts carry an 'rle' object")
        try:
            mask = rle.decode_mask(body)
        except (KeyError, ValueError, TypeError) as exc:
            fail("rle", f"bad RLE payload: {exc}")
        if mask.shape != (h, w):
            fail("rle", f"mask shape {mask.shape} does not match frame ({h}, {w})")
        return Prompt.from_mask(mask, frame)
    fail("kind", f"unknown prompt kind {kind!r}")


def create_app(model: PvsModel, ui_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="pvseg session service")
    model.eval()
    sessions: dict[str, Session] = {}
    store_lock = threading.Lock()
    app.state.sessions = sessions  # exposed for inspection and tests

    def sweep_idle():
        now = time.monotonic()
        with store_lock:
            for sid in [s for s, sess in sessions.items() if now - sess.last_access > SESSION_IDLE_SECONDS]:
                del sessions[sid]

    def get_session(sid: str) -> Session:
        sweep_idle()
        sess = sessions.get(sid)
        if sess is None:
            raise HTTPException(status_code=404, detail=f"unknown session {sid!r}")
        sess.last_access = time.monotonic()
        return sess

    class SessionWriter:
        """Serializes mutating requests on a session; 409 when busy."""

        def __init__(self, sess: Session):
            self.sess = sess

        def __enter__(self):
            if not self.sess.lock.acquire(blocking=False):
                raise HTTPException(status_code=409, detail="session is busy with another request")
            return self.sess

        def __exit__(self, *exc):
            self.sess.lock.release()
            return False

    @app.post("/v1/sessions")
    async def create_session(request: Request):
        sweep_idle()
        content_type = request.headers.get("content-type", "")
        if content_type.startswith("multipart/"):
            form = await request.form()
            uploads = [v for k, v in form.multi_items() if k == "frames"]
            if not uploads:
                raise HTTPException(status_code=422, detail="multipart upload needs 'frames' files")
            named = sorted(uploads, key=lambda u: u.filename or "")
            video = _decode_frames_from_uploads([await u.read() for u in named])
        else:
            try:
                body = await request.json()
            except json.JSONDecodeError:
                raise HTTPException(status_code=422, detail="body must be JSON or multipart frames")
            root = body.get("dataset_root")
            clip_id = body.get("clip_id")
            if not root or not clip_id:
                raise HTTPException(status_code=422, detail="need dataset_root and clip_id")
            try:
                manifest = read_manifest(root)
                entry = next((e for e in manifest["clips"] if e["id"] == clip_id), None)
                if entry is None:
                    raise HTTPException(status_code=422, detail=f"clip {clip_id!r} not in manifest")
                clip, _ = read_clip(root, entry)
            except FileNotFoundError as exc:
                raise HTTPException(status_code=422, detail=str(exc))
            video = clip.frames
        n, _, h, w = video.shape
        if h % 32 != 0 or w % 32 != 0:
            raise HTTPException(status_code=422, detail=f"frame size {h}x{w} must be divisible by 32")
        sid = uuid.uuid4().hex[:12]
        with store_lock:
            sessions[sid] = Session(id=sid, video=video)
        return {"id": sid, "n": int(n), "h": int(h), "w": int(w)}

    @app.post("/v1/sessions/{sid}/objects/{obj_id}/prompts")
    async def add_prompt(sid: str, obj_id: int, request: Request):
        sess = get_session(sid)
        body = await request.json()
        for key in ("frame", "kind", "payload"):
            if key not in body:
                raise HTTPException(status_code=422, detail=[{"loc": [key], "msg": "field required"}])
        n, h, w = sess.shape
        frame = body["frame"]
        if not isinstance(frame, int) or not (0 <= frame < n):
            raise HTTPException(
                status_code=422, detail=[{"loc": ["frame"], "msg": f"frame must be in [0, {n})"}]
            )
        prompt = _prompt_from_body(body["kind"], body["payload"], frame, h, w)
        with SessionWriter(sess):
            obj = sess.object(obj_id)
            obj.prompts.setdefault(frame, []).append(prompt)
            tracker = ObjectTracker(model, sess.video)
            tracker.begin()
            for t in range(frame):
                tracker.advance(t, obj.masks[t], is_prompt_frame=(t == obj.prompt_frame))
            mask = tracker.predict_mask(frame, obj.prompts[frame])
            obj.masks[frame] = mask
        return {"frame": frame, "mask": rle.encode_mask(mask)}

    @app.post("/v1/sessions/{sid}/objects/{obj_id}/propagate")
    async def propagate(sid: str, obj_id: int, request: Request):
        sess = get_session(sid)
        body = await request.json() if await request.body() else {}
        from_frame = body.get("from_frame", 0)
        n, _, _ = sess.shape
        if not isinstance(from_frame, int) or not (0 <= from_frame < n):
            raise HTTPException(
                status_code=422, detail=[{"loc": ["from_frame"], "msg": f"must be in [0, {n})"}]
            )
        with SessionWriter(sess):
            if obj_id not in sess.objects:
                raise HTTPException(status_code=404, detail=f"object {obj_id} has no prompts")
            obj = sess.objects[obj_id]
            masks = propagate_video(
                model,
                sess.video,
                obj.prompts,
                from_frame=from_frame,
                prior_masks=obj.masks,
                prompt_frame=obj.prompt_frame,
            )
            obj.masks = masks
        return {"masks": [rle.encode_mask(m) for m in masks]}

    @app.get("/v1/sessions/{sid}/objects/{obj_id}/masks/{t}")
    def get_mask(sid: str, obj_id: int, t: int):
        sess = get_session(sid)
        n, h, w = sess.shape
        if not (0 <= t < n):
            raise HTTPException(status_code=404, detail=f"frame {t} outside [0, {n})")
        if obj_id not in sess.objects:
            raise HTTPException(status_code=404, detail=f"unknown object {obj_id}")
        return rle.encode_mask(sess.objects[obj_id].masks[t])

    @app.get("/v1/sessions/{sid}")
    def session_info(sid: str):
        sess = get_session(sid)
        n, h, w = sess.shape
        return {
            "id": sess.id,
            "n": n,
            "h": h,
            "w": w,
            "objects": {
                str(o): {
                    "prompts": {
                        str(f): [_prompt_to_wire(p) for p in plist]
                        for f, plist in state.prompts.items()
                    }
                }
                for o, state in sess.objects.items()
            },
        }

    @app.get("/v1/sessions/{sid}/frames/{t}")
    def get_frame(sid: str, t: int):
        """Frame pixels as PNG (for the browser client)."""
        from PIL import Image

        sess = get_session(sid)
        n, _, _ = sess.shape
        if not (0 <= t < n):
            raise HTTPException(status_code=404, detail=f"frame {t} outside [0, {n})")
        u8 = np.transpose(np.round(sess.video[t] * 255).astype(np.uint8), (1, 2, 0))
        buf = io.BytesIO()
        Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
        from fastapi.responses import Response

        return Response(content=buf.getvalue(), media_type="image/png")

    @app.delete("/v1/sessions/{sid}")
    def delete_session(sid: str):
        sess = get_session(sid)
        with SessionWriter(sess):
            with store_lock:
                sessions.pop(sid, None)
        return JSONResponse({"deleted": sid})

    @app.exception_handler(PromptValidationError)
    def prompt_error_handler(request, exc):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    if ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def _prompt_to_wire(p: Prompt) -> dict:
    if p.kind == "click":
        return {"kind": "click", "x": p.point[0], "y": p.point[1], "polarity": p.polarity}
    if p.kind == "box":
        x0, y0, x1, y1 = p.box
        return {"kind": "box", "x0": x0, "y0": y0, "x1": x1, "y1": y1}
    return {"kind": "mask"}

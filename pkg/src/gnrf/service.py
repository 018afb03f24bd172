"""HTTP/JSON facade over a frozen checkpoint for interactive viewers.

The model never changes after startup; rendering is a pure read, and track
sessions live in an LRU-capped in-memory table.  Binary layers travel as
base64-encoded PPM (rgb, gear) or raw tensor files (semantic, depth).
"""

from __future__ import annotations

import base64
from collections import OrderedDict

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from . import render as rnd
from .cameras import Camera
from .sceneio import encode_ppm, encode_tensor, load_checkpoint, load_scene
from .track import OK, Tracker, pose_hash

SESSION_CAP = 64
MAX_PIXELS = 1024 * 1024

# gear heatmap palette: levels 1..4 (higher levels clamp to the last entry)
GEAR_PALETTE = np.array([
    [0.0, 0.0, 0.0],      # 0: no surface
    [0.20, 0.30, 0.80],   # 1
    [0.20, 0.80, 0.30],   # 2
    [0.95, 0.75, 0.10],   # 3
    [0.90, 0.15, 0.15],   # 4
])


def gear_to_rgb(gear_map):
    idx = np.clip(gear_map, 0, len(GEAR_PALETTE) - 1)
    return GEAR_PALETTE[idx]


class PoseSpec(BaseModel):
    view: str | None = None
    rotation: list[float] | None = None   # 9 reals, row-major world-from-camera
    translation: list[float] | None = None  # camera center in world
    fx: float | None = None
    fy: float | None = None
    cx: float | None = None
    cy: float | None = None
    width: int | None = None
    height: int | None = None


class RenderRequest(BaseModel):
    pose: PoseSpec
    time: float = 0.0
    layers: list[str] = ["rgb"]
    stride: int = 1


class ClickRequest(BaseModel):
    pose: PoseSpec
    time: float = 0.0
    pixel: list[int]


class QueryRequest(BaseModel):
    track_id: str
    pose: PoseSpec
    time: float = 0.0


def rle_payload(mask):
    return {"width": mask.width, "height": mask.height,
            "runs": [[s, l] for s, l in mask.rle()]}


def create_app(checkpoint=None, scene=None, model=None, n_samples=64) -> FastAPI:
    """Build the service; pass a checkpoint path or an in-memory model."""
    if model is None:
        if checkpoint is None:
            raise ValueError("need a checkpoint path or a model")
        model, _, _ = load_checkpoint(checkpoint)
    dataset = load_scene(scene) if isinstance(scene, (str,)) or hasattr(scene, "__fspath__") else scene
    tracker = Tracker(model, n_samples=n_samples)
    app = FastAPI(title="gnrf render service")
    sessions = OrderedDict()  # track_id -> session (LRU)
    stats = {"renders": 0, "track_queries": 0, "cache_hits": 0}

    def resolve_camera(pose: PoseSpec) -> Camera:
        if pose.view is not None:
            if dataset is None:
                raise HTTPException(400, "no scene loaded; use an explicit pose")
            try:
                return dataset.camera(pose.view)
            except KeyError:
                raise HTTPException(400, f"unknown view {pose.view!r}")
        needed = (pose.rotation, pose.translation, pose.fx, pose.fy,
                  pose.cx, pose.cy, pose.width, pose.height)
        if any(v is None for v in needed):
            raise HTTPException(400, "pose needs view or full explicit parameters")
        if len(pose.rotation) != 9 or len(pose.translation) != 3:
            raise HTTPException(400, "rotation must be 9 reals, translation 3")
        rot = np.asarray(pose.rotation).reshape(3, 3)
        err = np.abs(rot @ rot.T - np.eye(3)).max()
        if err > 1e-4 or abs(np.linalg.det(rot) - 1.0) > 1e-4:
            raise HTTPException(400, f"rotation not orthonormal (err {err:.2e})")
        if pose.width * pose.height > MAX_PIXELS:
            raise HTTPException(413, "requested image too large")
        try:
            return Camera(pose.fx, pose.fy, pose.cx, pose.cy, pose.width,
                          pose.height, rot, np.asarray(pose.translation))
        except ValueError as e:
            raise HTTPException(400, str(e))

    @app.get("/scene")
    def scene_meta():
        cams = [c.to_dict() for c in dataset.cameras] if dataset is not None else []
        return {
            "cameras": cams,
            "frames": model.config.frames,
            "bbox_min": list(model.config.bbox_min),
            "bbox_max": list(model.config.bbox_max),
            "n_gear": model.config.n_gear,
            "d_feat": model.config.d_feat,
        }

    @app.post("/render")
    def render(req: RenderRequest):
        camera = resolve_camera(req.pose)
        if camera.width * camera.height > MAX_PIXELS:
            raise HTTPException(413, "requested image too large")
        unknown = set(req.layers) - set(rnd.ALL_LAYERS)
        if unknown:
            raise HTTPException(400, f"unknown layers {sorted(unknown)}")
        if req.stride < 1:
            raise HTTPException(400, "stride must be >= 1")
        stats["renders"] += 1
        layers = rnd.render_layers(model, camera, req.time, layers=tuple(req.layers),
                                   stride=req.stride, n_samples=n_samples)
        out = {}
        if "rgb" in req.layers:
            out["rgb"] = base64.b64encode(encode_ppm(layers.rgb)).decode()
        if "gear" in req.layers:
            out["gear"] = base64.b64encode(encode_ppm(gear_to_rgb(layers.gear))).decode()
        if "depth" in req.layers:
            out["depth"] = base64.b64encode(encode_tensor(layers.depth)).decode()
        if "semantic" in req.layers:
            out["semantic"] = base64.b64encode(encode_tensor(layers.semantic)).decode()
        return {"layers": out, "width": layers.width, "height": layers.height}

    @app.post("/track/click")
    def track_click(req: ClickRequest):
        camera = resolve_camera(req.pose)
        u, v = req.pixel
        if not (0 <= u < camera.width and 0 <= v < camera.height):
            raise HTTPException(400, f"pixel {req.pixel} outside image")
        session = tracker.start_session(camera, req.time, (u, v))
        if session.status != OK:
            tracker.sessions.pop(session.session_id, None)
            raise HTTPException(422, detail={"status": "no-surface"})
        sessions[session.session_id] = session
        sessions.move_to_end(session.session_id)
        while len(sessions) > SESSION_CAP:
            evicted_id, _ = sessions.popitem(last=False)
            tracker.sessions.pop(evicted_id, None)
        mask = tracker.mask_at_view(session, camera, req.time)
        return {"track_id": session.session_id, "mask": rle_payload(mask),
                "status": tracker.status_at(session, camera, req.time)}

    @app.post("/track/query")
    def track_query(req: QueryRequest):
        session = sessions.get(req.track_id)
        if session is None:
            raise HTTPException(404, f"unknown track id {req.track_id!r}")
        sessions.move_to_end(req.track_id)
        camera = resolve_camera(req.pose)
        stats["track_queries"] += 1
        if (pose_hash(camera), float(req.time)) in session.cache:
            stats["cache_hits"] += 1
        mask = tracker.mask_at_view(session, camera, req.time)
        return {"mask": rle_payload(mask),
                "status": tracker.status_at(session, camera, req.time) or "empty"}

    @app.delete("/track/{track_id}")
    def track_delete(track_id: str):
        if track_id not in sessions:
            raise HTTPException(404, f"unknown track id {track_id!r}")
        del sessions[track_id]
        tracker.sessions.pop(track_id, None)
        return {}

    @app.get("/stats")
    def get_stats():
        return {**stats, "decode_calls": tracker.decode_calls_total(),
                "sessions": len(sessions)}

    return app

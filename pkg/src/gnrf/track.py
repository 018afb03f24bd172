"""Click-prompted free-viewpoint object tracking over a frozen model.

A click becomes a 3D anchor by walking the clicked ray to its first surface.
Novel-view masks reproject the anchor and decode the rendered semantic map;
novel-time masks chain frame to frame through bounding-box prompts.  Results
are cached per (camera pose, time).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import field as fld
from . import render as rnd
from .cameras import Camera, generate_ray, project_point
from .semantic import BoxPrompt, Mask, PointPrompt, decode_mask

OK = "ok"
EMPTY = "empty"
NO_SURFACE = "no-surface"


def pose_hash(camera: Camera) -> str:
    h = hashlib.sha1()
    h.update(np.round(camera.rotation, 9).tobytes())
    h.update(np.round(camera.position, 9).tobytes())
    h.update(np.asarray([camera.fx, camera.fy, camera.cx, camera.cy,
                         camera.width, camera.height], dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


@dataclass
class TrackSession:
    session_id: str
    source_camera: Camera
    source_time: float
    source_pixel: tuple
    anchor: np.ndarray = None      # 3D world point, None while status != ok
    status: str = NO_SURFACE
    cache: dict = field(default_factory=dict)  # (pose_hash, time) -> (Mask, status)
    decode_calls: int = 0


def click_to_point(model, camera: Camera, time, pixel, n_samples=64):
    """Promote a click to the 3D first-surface point along its ray.

    Returns (point, depth) or (None, None) when the ray never meets a surface.
    """
    ray = generate_ray(camera, pixel, time, model.config.bbox_min, model.config.bbox_max)
    if ray is None:
        return None, None
    samples = rnd.sample_uniform(ray, n_samples)
    samples = rnd.gear_split(samples, model)
    with ad.no_grad():
        gears = samples.gear
        offsets = np.array([0, len(samples)], dtype=np.int64)
        dt = model.config.np_dtype
        sig, col, sem = fld.field_forward_rows(
            model, samples.positions.astype(dt),
            np.full(len(samples), float(time), dtype=dt),
            gears, ray.direction[None], np.zeros(len(samples), dtype=np.int64), offsets)
    rnd.composite(samples, sig.data.astype(np.float64), col.data, sem.data)
    depth = rnd.estimate_depth(samples)
    if depth is None:
        return None, None
    return ray.origin + depth * ray.direction, depth


class Tracker:
    """Owns sessions and the per-(pose, time) mask cache."""

    def __init__(self, model, n_samples=64, tau=0.85, occlusion_slack=2.0):
        self.model = model
        self.n_samples = n_samples
        self.tau = tau
        self.occlusion_slack = occlusion_slack  # in units of mean sample spacing
        self.sessions = {}
        self._counter = 0

    def decode_calls_total(self):
        return sum(s.decode_calls for s in self.sessions.values())

    def start_session(self, camera: Camera, time, pixel) -> TrackSession:
        self._counter += 1
        sid = f"track-{self._counter:04d}"
        session = TrackSession(sid, camera, float(time), tuple(pixel))
        anchor, _depth = click_to_point(self.model, camera, time, pixel, self.n_samples)
        if anchor is not None:
            session.anchor = anchor
            session.status = OK
        self.sessions[sid] = session
        return session

    # -- masks at novel viewpoints -------------------------------------------

    def mask_at_view(self, session: TrackSession, camera: Camera, time=None) -> Mask:
        """Object mask in `camera` at `time` (source time by default)."""
        if session.status != OK:
            return self._empty(camera, NO_SURFACE)
        t = session.source_time if time is None else float(time)
        key = (pose_hash(camera), t)
        if key in session.cache:
            return session.cache[key][0]
        if t == session.source_time:
            mask, status = self._decode_at(session, camera, t)
        else:
            mask, status = self._propagate(session, camera, t)
        session.cache[key] = (mask, status)
        return mask

    def status_at(self, session, camera, time=None):
        t = session.source_time if time is None else float(time)
        entry = session.cache.get((pose_hash(camera), t))
        return entry[1] if entry else None

    def _decode_at(self, session, camera, t):
        px = project_point(session.anchor, camera)
        if px is None:
            return self._mask_pair(camera, EMPTY)
        u, v = int(np.floor(px[0])), int(np.floor(px[1]))
        if not (0 <= u < camera.width and 0 <= v < camera.height):
            return self._mask_pair(camera, EMPTY)
        layers = rnd.render_layers(self.model, camera, t,
                                   layers=("semantic", "depth"),
                                   n_samples=self.n_samples)
        anchor_dist = float(np.linalg.norm(session.anchor - camera.position))
        tol = self.occlusion_slack * self._mean_spacing(camera)
        d = layers.depth[v, u]
        if np.isfinite(d) and d < anchor_dist - tol:
            return self._mask_pair(camera, EMPTY)  # something occludes the anchor
        session.decode_calls += 1
        mask = decode_mask(layers.semantic, [PointPrompt(u, v, True)], tau=self.tau)
        return mask, (OK if not mask.empty else EMPTY)

    def _propagate(self, session, camera, target_t):
        """Step one frame at a time from the nearest cached time on this pose."""
        ph = pose_hash(camera)
        cached_times = [k[1] for k, (m, s) in session.cache.items()
                        if k[0] == ph and s == OK]
        start_t = min(cached_times, key=lambda ct: abs(ct - target_t)) \
            if cached_times else session.source_time
        if not cached_times:
            mask, status = self._decode_at(session, camera, start_t)
            session.cache[(ph, start_t)] = (mask, status)
            if status != OK:
                return mask, status
        t = start_t
        mask = session.cache[(ph, t)][0]
        step = 1.0 if target_t > t else -1.0
        while t != target_t:
            t_next = t + step
            box = mask.bbox()
            if box is None:
                return self._mask_pair(camera, EMPTY)
            layers = rnd.render_layers(self.model, camera, t_next,
                                       layers=("semantic",), n_samples=self.n_samples)
            session.decode_calls += 1
            mask = decode_mask(layers.semantic, [BoxPrompt(*box)], tau=self.tau)
            status = OK if not mask.empty else EMPTY
            session.cache[(ph, t_next)] = (mask, status)
            if status != OK:
                return mask, status  # chain halts at the failing frame
            t = t_next
        return mask, OK

    def _mean_spacing(self, camera):
        cfg = self.model.config
        diag = np.linalg.norm(np.asarray(cfg.bbox_max) - np.asarray(cfg.bbox_min))
        return diag / self.n_samples

    def _empty(self, camera, status):
        return Mask(np.zeros((camera.height, camera.width), dtype=bool))

    def _mask_pair(self, camera, status):
        return Mask(np.zeros((camera.height, camera.width), dtype=bool)), status

"""Pinhole cameras, ray generation and point projection.

Convention: +z is the camera forward axis, pixel centers sit at half-integer
coordinates, `rotation` maps camera coordinates into world coordinates and
`position` is the camera center in world space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # 3x3, world-from-camera
    position: np.ndarray  # camera center in world
    cam_id: str = ""

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ValueError(f"camera {self.cam_id!r}: rotation is not a proper rotation (err={err:.2e})")

    def to_dict(self):
        return {
            "id": self.cam_id, "fx": self.fx, "fy": self.fy, "cx": self.cx,
            "cy": self.cy, "width": self.width, "height": self.height,
            "rotation": self.rotation.reshape(-1).tolist(),
            "position": self.position.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                   np.asarray(d["rotation"]).reshape(3, 3), np.asarray(d["position"]),
                   cam_id=d.get("id", ""))


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit
    t_near: float
    t_far: float
    time: float = 0.0


def look_at(position, target, up=(0.0, 0.0, 1.0)):
    """World-from-camera rotation with +z pointing from `position` to `target`."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking along up; pick any perpendicular
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def pixel_directions(camera: Camera, us, vs):
    """World-space unit directions through pixel centers (u+0.5, v+0.5)."""
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    x = (us + 0.5 - camera.cx) / camera.fx
    y = (vs + 0.5 - camera.cy) / camera.fy
    d = np.stack([x, y, np.ones_like(x)], axis=-1)
    d = d @ camera.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d


def ray_box_range(origins, dirs, bbox_min, bbox_max):
    """Slab intersection of rays with an AABB.

    Returns (t_near, t_far, hit).  Entry behind the origin clamps to 0.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # axis-parallel rays: ignore that slab unless the origin is outside it
    par = dirs == 0.0
    outside = par & ((origins < lo) | (origins > hi))
    tmin = np.where(par, -np.inf, tmin)
    tmax = np.where(par, np.inf, tmax)
    t_near = np.maximum(tmin.max(axis=-1), 0.0)
    t_far = tmax.min(axis=-1)
    hit = (t_far > t_near) & ~outside.any(axis=-1)
    return t_near, t_far, hit


def generate_ray(camera: Camera, pixel, time, bbox_min, bbox_max):
    """Back-project one pixel; returns None when the ray misses the scene box."""
    u, v = pixel
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise ValueError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    d = pixel_directions(camera, np.array([u]), np.array([v]))[0]
    tn, tf, hit = ray_box_range(camera.position[None], d[None], bbox_min, bbox_max)
    if not hit[0]:
        return None
    return Ray(camera.position.copy(), d, float(tn[0]), float(tf[0]), float(time))


def project_point(point, camera: Camera):
    """World point -> continuous pixel coordinates, or None if behind camera."""
    pc = camera.rotation.T @ (np.asarray(point, dtype=np.float64) - camera.position)
    if pc[2] <= 0.0:
        return None
    return (camera.fx * pc[0] / pc[2] + camera.cx,
            camera.fy * pc[1] / pc[2] + camera.cy)


def camera_ring(count, radius, elevation, target, fov_deg, width, height, start_angle=0.0):
    """Evenly spaced cameras on a horizontal ring looking at `target`."""
    cams = []
    target = np.asarray(target, dtype=np.float64)
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
    for k in range(count):
        ang = start_angle + 2.0 * np.pi * k / count
        pos = target + np.array([radius * np.cos(ang), radius * np.sin(ang), elevation])
        cams.append(Camera(f, f, width / 2.0, height / 2.0, width, height,
                           look_at(pos, target), pos, cam_id=f"cam{k:02d}"))
    return cams

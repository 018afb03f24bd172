"""Ray sampling, gear-driven point splitting and volume compositing.

Two API layers share the same kernels: per-ray functions operating on
`SampleSet` (the contract exercised by unit tests) and flat batched paths
(`RayBatch`/`FlatSamples`) used by the trainer and renderer, where all rays
of a batch live in one array indexed by an offset table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from . import autodiff as ad
from . import field as fld
from .autodiff import _weights_fwd, _wsum_fwd
from .cameras import Camera, Ray, pixel_directions, ray_box_range

NO_SURFACE = np.inf  # depth marker for rays that never meet a surface

SPLIT_STRATEGIES = ("exp2", "exp3", "linear")


def split_count(gear, strategy):
    """Points a gear-`gear` sample splits into."""
    gear = np.asarray(gear)
    if strategy == "exp2":
        return 2 ** (gear - 1)
    if strategy == "exp3":
        return 3 ** (gear - 1)
    if strategy == "linear":
        return 2 * gear - 1
    raise ValueError(f"unknown split strategy {strategy!r}")


# ---------------------------------------------------------------------------
# per-ray sample sets


@dataclass
class SampleSet:
    """Ordered samples along one ray; compositing fills alpha/T/weight."""

    ray: Ray
    t: np.ndarray
    delta: np.ndarray
    positions: np.ndarray
    gear: np.ndarray = None
    alpha: np.ndarray = None
    transmittance: np.ndarray = None
    weight: np.ndarray = None

    def __len__(self):
        return len(self.t)


def sample_uniform(ray: Ray, n: int, rng: np.random.Generator = None) -> SampleSet:
    """n samples over [t_near, t_far]: cell midpoints, or stratified when an
    RNG is supplied.  Midpoint samples all carry the cell width as delta; the
    jittered path uses forward differences with delta_N = t_far - t_N."""
    if n < 1:
        raise ValueError("need at least one sample")
    h = (ray.t_far - ray.t_near) / n
    if rng is None:
        t = ray.t_near + (np.arange(n) + 0.5) * h
        delta = np.full(n, h)
    else:
        t = ray.t_near + (np.arange(n) + rng.uniform(size=n)) * h
        delta = np.empty(n)
        delta[:-1] = np.diff(t)
        delta[-1] = ray.t_far - t[-1]
    pos = ray.origin[None, :] + t[:, None] * ray.direction[None, :]
    return SampleSet(ray, t, delta, pos)


def gear_split(samples: SampleSet, model, strategy=None) -> SampleSet:
    """Split each sample into split_count(gear) children equally spaced in the
    sample's cell (the delta-wide interval centered on it); children inherit
    the parent's gear and delta/count."""
    strategy = strategy or model.config.split_strategy
    times = np.full(len(samples), samples.ray.time)
    parent_gear = fld.gear_levels(model, samples.positions, times)
    t, delta, gear, _ = _split_arrays(samples.t, samples.delta, parent_gear, strategy)
    pos = samples.ray.origin[None, :] + t[:, None] * samples.ray.direction[None, :]
    return SampleSet(samples.ray, t, delta, pos, gear=gear)


def _split_arrays(t, delta, gear, strategy):
    counts = split_count(gear, strategy).astype(np.int64)
    if (counts == 1).all():
        return t.copy(), delta.copy(), gear.copy(), counts
    total = int(counts.sum())
    parent = np.repeat(np.arange(len(t)), counts)
    ends = np.cumsum(counts)
    rank = np.arange(total) - np.repeat(ends - counts, counts)
    m = counts[parent]
    child_delta = delta[parent] / m
    left = t[parent] - delta[parent] * 0.5
    child_t = left + (rank + 0.5) * child_delta
    single = m == 1
    child_t[single] = t[parent[single]]  # unsplit samples stay bit-identical
    child_delta[single] = delta[parent[single]]
    return child_t, child_delta, gear[parent], counts


def composite(samples: SampleSet, sigma, color, semantic, background=(0.0, 0.0, 0.0)):
    """Volume-render one ray: returns (rgb, semantic, weights, final_T) and
    records alpha/transmittance/weight on the sample set."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if (sigma < 0).any():
        raise ValueError("densities must be non-negative")
    offsets = np.array([0, len(samples)], dtype=np.int64)
    w = np.empty_like(sigma)
    tfin = np.empty(1, dtype=sigma.dtype)
    _weights_fwd(sigma, samples.delta.astype(sigma.dtype), offsets, w, tfin)
    sd = sigma * samples.delta
    samples.alpha = 1.0 - np.exp(-sd)
    samples.transmittance = np.exp(-np.concatenate([[0.0], np.cumsum(sd[:-1])]))
    samples.weight = w
    rgb = (w[:, None] * np.asarray(color)).sum(axis=0) + tfin[0] * np.asarray(background)
    sem = (w[:, None] * np.asarray(semantic)).sum(axis=0)
    return rgb, sem, w, float(tfin[0])


def estimate_depth(samples: SampleSet):
    """Depth of the first surface: smallest t where transmittance falls below
    0.5; expected depth if it never does but enough weight accumulated; None
    on empty rays."""
    if samples.weight is None:
        raise ValueError("composite the samples first")
    t_after = samples.transmittance * (1.0 - samples.alpha)
    below = np.nonzero(t_after < 0.5)[0]
    if len(below):
        return float(samples.t[below[0]])
    wsum = samples.weight.sum()
    if wsum > 0.05:
        return float((samples.weight * samples.t).sum() / wsum)
    return None


# ---------------------------------------------------------------------------
# flat batches


@dataclass
class RayBatch:
    origins: np.ndarray  # [B,3]
    dirs: np.ndarray     # [B,3] unit
    t_near: np.ndarray
    t_far: np.ndarray
    times: np.ndarray
    valid: np.ndarray    # rays that intersect the scene box

    def __len__(self):
        return len(self.dirs)


@dataclass
class FlatSamples:
    t: np.ndarray
    delta: np.ndarray
    pos: np.ndarray
    times: np.ndarray
    gear: np.ndarray
    offsets: np.ndarray  # [B+1]
    ray_ids: np.ndarray  # [P]


def rays_for_pixels(camera: Camera, us, vs, time, bbox_min, bbox_max) -> RayBatch:
    dirs = pixel_directions(camera, us, vs)
    origins = np.broadcast_to(camera.position, dirs.shape)
    tn, tf, hit = ray_box_range(origins, dirs, bbox_min, bbox_max)
    tf = np.where(hit, tf, tn + 1.0)  # keep invalid rays well-formed
    return RayBatch(np.ascontiguousarray(origins), dirs, tn, tf,
                    np.full(len(dirs), float(time)), hit)


def sample_batch(batch: RayBatch, model, n, split=True, dtype=np.float32) -> FlatSamples:
    """Uniform midpoints on every ray, then gear splitting (vectorized)."""
    b = len(batch)
    h = (batch.t_far - batch.t_near) / n
    t = (batch.t_near[:, None] + (np.arange(n) + 0.5)[None, :] * h[:, None]).reshape(-1)
    delta = np.repeat(h, n)
    parent_rays = np.repeat(np.arange(b), n)
    if split and model.config.n_gear > 1:
        pos = batch.origins[parent_rays] + t[:, None] * batch.dirs[parent_rays]
        times = batch.times[parent_rays]
        gear = fld.gear_levels(model, pos.astype(dtype), times.astype(dtype))
        t, delta, gear, counts = _split_arrays(t, delta, gear, model.config.split_strategy)
        per_ray = counts.reshape(b, n).sum(axis=1)
        offsets = np.concatenate([[0], np.cumsum(per_ray)]).astype(np.int64)
        ray_ids = np.repeat(np.arange(b), per_ray)
    else:
        gear = np.ones(len(t), dtype=np.int64)
        offsets = (np.arange(b + 1) * n).astype(np.int64)
        ray_ids = parent_rays
    pos = batch.origins[ray_ids] + t[:, None] * batch.dirs[ray_ids]
    times = batch.times[ray_ids]
    return FlatSamples(t.astype(dtype), delta.astype(dtype), pos.astype(dtype),
                       times.astype(dtype), gear, offsets, ray_ids)


def composite_batch(sigma, color, sem, flat: FlatSamples, background):
    """Tape-free batched compositing -> (rgb [B,3], sem [B,D], w [P], tfin [B])."""
    sigma = np.ascontiguousarray(sigma)
    w = np.empty_like(sigma)
    nray = len(flat.offsets) - 1
    tfin = np.empty(nray, dtype=sigma.dtype)
    _weights_fwd(sigma, flat.delta.astype(sigma.dtype), flat.offsets, w, tfin)
    rgb = np.empty((nray, 3), dtype=sigma.dtype)
    _wsum_fwd(w, np.ascontiguousarray(color), flat.offsets, rgb)
    rgb += tfin[:, None] * np.asarray(background, dtype=sigma.dtype)
    semout = np.empty((nray, sem.shape[1]), dtype=sigma.dtype)
    _wsum_fwd(w, np.ascontiguousarray(sem), flat.offsets, semout)
    return rgb, semout, w, tfin


def depth_batch(sigma, w, flat: FlatSamples):
    """Median-termination depth per ray (NO_SURFACE where undefined)."""
    sd = sigma * flat.delta
    depth = np.full(len(flat.offsets) - 1, NO_SURFACE)
    _depth_kernel(np.ascontiguousarray(sd, dtype=np.float64),
                  np.ascontiguousarray(w, dtype=np.float64),
                  flat.t.astype(np.float64), flat.offsets, depth)
    return depth


@njit(parallel=True, fastmath=True, cache=True)
def _depth_kernel(sd, w, t, offsets, depth):
    nray = offsets.shape[0] - 1
    for r in prange(nray):
        acc = 0.0
        found = False
        for i in range(offsets[r], offsets[r + 1]):
            acc += sd[i]
            if np.exp(-acc) < 0.5:
                depth[r] = t[i]
                found = True
                break
        if not found:
            wsum = 0.0
            wt = 0.0
            for i in range(offsets[r], offsets[r + 1]):
                wsum += w[i]
                wt += w[i] * t[i]
            if wsum > 0.05:
                depth[r] = wt / wsum


# ---------------------------------------------------------------------------
# image rendering


@dataclass
class RenderedLayers:
    """Per-view/time image stack; absent layers are None."""

    width: int
    height: int
    rgb: np.ndarray = None       # [H,W,3] in [0,1]
    semantic: np.ndarray = None  # [H,W,D]
    depth: np.ndarray = None     # [H,W], NO_SURFACE where empty
    gear: np.ndarray = None      # [H,W] int, 0 where no surface


ALL_LAYERS = ("rgb", "semantic", "depth", "gear")


def render_layers(model, camera: Camera, time, layers=("rgb",), stride=1,
                  n_samples=64, background=(0.0, 0.0, 0.0), chunk=4096,
                  split=True) -> RenderedLayers:
    """Render the requested layers at optionally strided resolution.

    Output pixel (i, j) equals full-resolution pixel (i*stride, j*stride).
    The gear layer records the gear level at each ray's surface point.
    """
    unknown = set(layers) - set(ALL_LAYERS)
    if unknown:
        raise ValueError(f"unknown layers {sorted(unknown)}")
    cfg = model.config
    xs = np.arange(0, camera.width, stride)
    ys = np.arange(0, camera.height, stride)
    w_out, h_out = len(xs), len(ys)
    uu, vv = np.meshgrid(xs, ys)
    us, vs = uu.reshape(-1), vv.reshape(-1)
    need_depth = "depth" in layers or "gear" in layers
    bg = np.asarray(background, dtype=np.float64)

    out = RenderedLayers(w_out, h_out)
    rgb = np.zeros((h_out * w_out, 3)) if "rgb" in layers else None
    sem = np.zeros((h_out * w_out, cfg.d_feat)) if "semantic" in layers else None
    dep = np.full(h_out * w_out, NO_SURFACE) if need_depth else None
    gearmap = np.zeros(h_out * w_out, dtype=np.int64) if "gear" in layers else None

    with ad.no_grad():
        for lo in range(0, len(us), chunk):
            sl = slice(lo, lo + chunk)
            batch = rays_for_pixels(camera, us[sl], vs[sl], time, cfg.bbox_min, cfg.bbox_max)
            valid = batch.valid
            if rgb is not None:
                rgb[sl] = bg
            if not valid.any():
                continue
            vb = RayBatch(batch.origins[valid], batch.dirs[valid], batch.t_near[valid],
                          batch.t_far[valid], batch.times[valid], batch.valid[valid])
            flat = sample_batch(vb, model, n_samples, split=split, dtype=cfg.np_dtype)
            sig, col, s = fld.field_forward_rows(
                model, flat.pos, flat.times, flat.gear, vb.dirs, flat.ray_ids, flat.offsets)
            c, sm, w, _tf = composite_batch(sig.data, col.data, s.data, flat, bg)
            idx = np.nonzero(valid)[0] + lo
            if rgb is not None:
                rgb[idx] = c
            if sem is not None:
                sem[idx] = sm
            if need_depth:
                d = depth_batch(sig.data, w, flat)
                dep[idx] = d
                if gearmap is not None:
                    has = np.isfinite(d)
                    if has.any():
                        spt = vb.origins[has] + d[has, None] * vb.dirs[has]
                        gl = fld.gear_levels(model, spt.astype(cfg.np_dtype),
                                             vb.times[has].astype(cfg.np_dtype))
                        gm = np.zeros(len(d), dtype=np.int64)
                        gm[has] = gl
                        gearmap[idx] = gm

    if rgb is not None:
        out.rgb = np.clip(rgb, 0.0, 1.0).reshape(h_out, w_out, 3)
    if sem is not None:
        out.semantic = sem.reshape(h_out, w_out, cfg.d_feat)
    if dep is not None and "depth" in layers:
        out.depth = dep.reshape(h_out, w_out)
    if gearmap is not None:
        out.gear = gearmap.reshape(h_out, w_out)
    return out

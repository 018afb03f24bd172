"""Pluggable stand-ins for a promptable segmentation model.

A feature provider supplies pixel-aligned feature maps (synthetic prototypes
or precomputed maps from disk), and a prompt decoder grows masks from point
or box prompts by cosine-similarity region growing over those features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .sceneio import SceneDataset, SceneGeometry, oracle_render, object_prototypes

TAU_SIM = 0.85  # cosine similarity acceptance threshold

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass
class PointPrompt:
    u: int
    v: int
    positive: bool = True


@dataclass
class BoxPrompt:
    u0: int
    v0: int
    u1: int
    v1: int

    def __post_init__(self):
        if not (self.u1 > self.u0 and self.v1 > self.v0):
            raise ValueError("degenerate box prompt")


@dataclass
class Mask:
    values: np.ndarray  # [H,W] bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=bool)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def empty(self):
        return not self.values.any()

    def bbox(self):
        """Tight (u0, v0, u1, v1) around foreground; None when empty."""
        ys, xs = np.nonzero(self.values)
        if len(xs) == 0:
            return None
        return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1

    def rle(self):
        """(start, length) runs over row-major foreground pixels."""
        flat = self.values.reshape(-1)
        if not flat.any():
            return []
        padded = np.concatenate([[False], flat, [False]])
        edges = np.nonzero(padded[1:] != padded[:-1])[0]
        starts, stops = edges[0::2], edges[1::2]
        return [(int(s), int(e - s)) for s, e in zip(starts, stops)]

    @classmethod
    def from_rle(cls, runs, width, height):
        flat = np.zeros(width * height, dtype=bool)
        for start, length in runs:
            if start < 0 or start + length > flat.size or length <= 0:
                raise ValueError(f"run ({start}, {length}) outside {width}x{height} mask")
            flat[start : start + length] = True
        return cls(flat.reshape(height, width))


# ---------------------------------------------------------------------------
# feature providers


class SyntheticFeatureProvider:
    """Features straight from the analytic renderer: each object id maps to a
    fixed random unit vector (the background box has its own)."""

    def __init__(self, preset):
        self.geometry = SceneGeometry(preset)
        self.prototypes = object_prototypes(preset)
        self.preset = preset

    def features(self, camera, time):
        _, _, ids = oracle_render(self.geometry, camera, time)
        out = np.zeros((*ids.shape, self.preset.d_feat), dtype=np.float32)
        hit = ids >= 0
        out[hit] = self.prototypes[ids[hit]]
        return out


class DiskFeatureProvider:
    """Feature maps stored with the dataset (precomputed externally or at
    generation time); optionally downscaled by integer striding."""

    def __init__(self, scene: SceneDataset, downscale=1):
        self.scene = scene
        self.downscale = downscale

    def features(self, cam_id, time):
        fm = self.scene.features(cam_id, time)
        if self.downscale > 1:
            fm = fm[:: self.downscale, :: self.downscale]
        return fm


def provide_features(source, view, time):
    """Uniform entry point: `source` is a provider; view is a Camera or id."""
    return source.features(view, time)


# ---------------------------------------------------------------------------
# prompt decoding


def _normalize(features):
    norm = np.linalg.norm(features, axis=-1, keepdims=True)
    return np.where(norm > 0, features / np.maximum(norm, 1e-12), 0.0)


def decode_mask(features, prompts, tau=TAU_SIM) -> Mask:
    """Similarity region growing from point/box prompts.

    Candidates are pixels whose cosine similarity to the positive prototype
    reaches `tau` and strictly exceeds their best similarity to any negative
    point.  The mask is the union of 4-connected candidate components that
    contain a seed; box prompts clip growth to the box dilated 25% per side.
    """
    features = np.asarray(features)
    h, w = features.shape[:2]
    pts = [p for p in prompts if isinstance(p, PointPrompt)]
    boxes = [p for p in prompts if isinstance(p, BoxPrompt)]
    pos_pts = [p for p in pts if p.positive]
    neg_pts = [p for p in pts if not p.positive]
    if not pos_pts and not boxes:
        raise ValueError("need at least one positive point or box prompt")
    for p in pts:
        if not (0 <= p.u < w and 0 <= p.v < h):
            raise ValueError(f"point prompt ({p.u}, {p.v}) outside {w}x{h} image")
    for b in boxes:
        if not (0 <= b.u0 < b.u1 <= w and 0 <= b.v0 < b.v1 <= h):
            raise ValueError("box prompt outside image")

    nf = _normalize(features)
    seeds = [(p.v, p.u) for p in pos_pts]
    proto_feats = [nf[p.v, p.u] for p in pos_pts]
    clip = None
    if boxes:
        b = boxes[0]
        box_feats = nf[b.v0 : b.v1, b.u0 : b.u1].reshape(-1, features.shape[-1])
        box_mean = _normalize(box_feats.mean(axis=0))
        sims = box_feats @ box_mean
        flat = int(np.argmax(sims))
        sv, su = b.v0 + flat // (b.u1 - b.u0), b.u0 + flat % (b.u1 - b.u0)
        seeds.append((sv, su))
        proto_feats.append(nf[sv, su])
        du = int(round(0.25 * (b.u1 - b.u0)))
        dv = int(round(0.25 * (b.v1 - b.v0)))
        clip = (max(0, b.u0 - du), max(0, b.v0 - dv),
                min(w, b.u1 + du), min(h, b.v1 + dv))

    proto = _normalize(np.mean(proto_feats, axis=0))
    sim = nf @ proto
    cand = sim >= tau
    if neg_pts:
        neg = np.stack([nf[p.v, p.u] for p in neg_pts])
        neg_sim = (nf @ neg.T).max(axis=-1)
        cand &= sim > neg_sim
    if clip is not None:
        box_area = np.zeros((h, w), dtype=bool)
        box_area[clip[1] : clip[3], clip[0] : clip[2]] = True
        cand &= box_area

    if not cand.any():
        return Mask(cand)
    labels, _ = ndimage.label(cand, structure=_FOUR_CONN)
    keep = {labels[sv, su] for sv, su in seeds if cand[sv, su]}
    keep.discard(0)
    if not keep:
        return Mask(np.zeros((h, w), dtype=bool))  # seeds failed their own threshold
    return Mask(np.isin(labels, sorted(keep)))

"""Dataset and checkpoint formats plus the synthetic scene generator.

File formats (all little-endian, bit-exact round trips):
  * RGB images: binary PPM (P6, 8-bit).
  * Tensors (feature maps, depth, id maps): "GNRF" raw tensor files.
  * Checkpoints: "GNCK" header + JSON config/tensor index + raw payloads.
  * Scene manifest: one JSON document; all paths relative to it.

The generator ray-traces spheres and boxes analytically (Lambertian shading,
no shadows) and emits exact depth, per-pixel object ids, and feature maps
built from per-object prototype vectors.  Those outputs double as the ground
truth oracle for rendering and tracking tests.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .cameras import Camera, camera_ring, pixel_directions


class FormatError(Exception):
    """Malformed or mismatched on-disk data."""


class ConfigConflictError(FormatError):
    """Checkpoint config contradicts an explicitly requested value."""


# ---------------------------------------------------------------------------
# PPM images


def encode_ppm(image) -> bytes:
    """Encode an [H,W,3] float image in [0,1] as binary 8-bit PPM bytes."""
    image = np.asarray(image)
    h, w, _ = image.shape
    data = np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode() + data.tobytes()


def write_ppm(path, image):
    with open(path, "wb") as f:
        f.write(encode_ppm(image))


def read_ppm(path):
    """Read a binary PPM into an [H,W,3] uint8 array."""
    with open(path, "rb") as f:
        blob = f.read()
    return decode_ppm(blob, path)


def decode_ppm(blob, path="<bytes>"):
    if not blob.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM (bad magic)")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    payload = blob[pos : pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise FormatError(f"{path}: truncated pixel payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def read_ppm_float(path):
    return read_ppm(path).astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# raw tensor files

_TENSOR_MAGIC = b"GNRF"
_TENSOR_VERSION = 1
_DTYPE_F32 = 0


def encode_tensor(array) -> bytes:
    """Encode a float32 nd-array: magic, version u16, dtype u8, ndim u8, dims u32[]."""
    array = np.ascontiguousarray(array, dtype=np.float32)
    return (_TENSOR_MAGIC
            + struct.pack("<HBB", _TENSOR_VERSION, _DTYPE_F32, array.ndim)
            + struct.pack(f"<{array.ndim}I", *array.shape)
            + array.astype("<f4").tobytes())


def write_tensor(path, array):
    with open(path, "wb") as f:
        f.write(encode_tensor(array))


def read_tensor(path):
    with open(path, "rb") as f:
        blob = f.read()
    return decode_tensor(blob, path)


def decode_tensor(blob, path="<bytes>"):
    if blob[:4] != _TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, dtype, ndim = struct.unpack_from("<HBB", blob, 4)
    if version != _TENSOR_VERSION:
        raise FormatError(f"{path}: unsupported tensor format version {version}")
    if dtype != _DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype tag {dtype}")
    dims = struct.unpack_from(f"<{ndim}I", blob, 8)
    payload = blob[8 + 4 * ndim :]
    expect = int(np.prod(dims)) * 4
    if len(payload) != expect:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expect}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


# ---------------------------------------------------------------------------
# synthetic scene presets and analytic geometry

PRESET_NAMES = ("orbiting-sphere", "static-box", "two-objects")


@dataclass
class SynthPreset:
    name: str = "orbiting-sphere"
    sphere_radius: float = 0.75
    traj_amplitude: float = 1.2
    traj_period: float = 0.0  # frames per orbit; 0 = two orbits over the clip
    box_extents: float = 0.9  # static cube half-width (static-box / two-objects)
    wall_half: float = 3.0
    camera_count: int = 8
    holdout_count: int = 1
    camera_radius: float = 2.35
    camera_elevation: float = 1.0
    fov_deg: float = 62.0
    image_size: int = 64
    frames: int = 24
    light_dir: tuple = (0.42, -0.30, 0.855)
    d_feat: int = 16
    enclosed: bool = True
    seed: int = 7

    def validate(self):
        if self.name not in PRESET_NAMES:
            raise ValueError(f"unknown preset {self.name!r}")
        if self.name != "static-box":
            reach = self.traj_amplitude + self.sphere_radius
            if self.enclosed and reach >= self.wall_half:
                raise ValueError("trajectory leaves the scene box")


def preset_by_name(name, **overrides):
    base = {
        "orbiting-sphere": {},
        "static-box": {"frames": 4},
        "two-objects": {"sphere_radius": 0.6, "traj_amplitude": 1.3, "box_extents": 0.55},
    }
    if name not in base:
        raise ValueError(f"unknown preset {name!r} (choose from {PRESET_NAMES})")
    kw = dict(base[name])
    kw.update(overrides)
    p = SynthPreset(name=name, **kw)
    p.validate()
    return p


_WALL_COLORS = np.array([
    [0.75, 0.62, 0.55], [0.55, 0.68, 0.75],   # +x, -x
    [0.62, 0.75, 0.58], [0.72, 0.58, 0.70],   # +y, -y
    [0.70, 0.70, 0.72], [0.60, 0.57, 0.52],   # +z, -z
])
_SPHERE_C1 = np.array([0.85, 0.30, 0.20])
_SPHERE_C2 = np.array([0.95, 0.82, 0.35])
_CUBE_COLOR = np.array([0.45, 0.62, 0.85])
_AMBIENT = 0.35
_CHECKER_CELL = 1.2

WALL_ID = 0
SPHERE_ID = 1
CUBE_ID = 2


class SceneGeometry:
    """Analytic scene: optional enclosing box, optional moving sphere,
    optional static cube.  All intersections are closed-form."""

    def __init__(self, preset: SynthPreset):
        preset.validate()
        self.preset = preset
        self.light = np.asarray(preset.light_dir, dtype=np.float64)
        self.light = self.light / np.linalg.norm(self.light)
        self.has_sphere = preset.name in ("orbiting-sphere", "two-objects")
        self.has_cube = preset.name in ("static-box", "two-objects")
        if preset.name == "two-objects":
            self.cube_center = np.array([-1.9, -1.9, -1.0])
        else:
            self.cube_center = np.zeros(3)

    def sphere_center(self, time):
        # fast default motion (two orbits per clip) so temporally coarse
        # models ghost visibly and the gear machinery has signal to act on
        period = self.preset.traj_period or max(self.preset.frames / 2.0, 1.0)
        ang = 2.0 * np.pi * time / period
        a = self.preset.traj_amplitude
        return np.array([a * np.cos(ang), a * np.sin(ang), 0.0])

    def dynamic_region(self, time):
        """Bounding sphere of the moving object at `time` (None if static)."""
        if not self.has_sphere:
            return None
        return self.sphere_center(time), self.preset.sphere_radius

    def scene_bounds(self, margin=0.05):
        if self.preset.enclosed:
            h = self.preset.wall_half * (1.0 + margin)
            return (-h, -h, -h), (h, h, h)
        reach = self.preset.traj_amplitude + self.preset.sphere_radius
        if self.has_cube:
            reach = max(reach, float(np.abs(self.cube_center).max() + self.preset.box_extents))
        h = reach * (1.0 + margin) + 0.25
        return (-h, -h, -h), (h, h, h)

    # -- intersection helpers (vectorized over rays) ------------------------

    def _hit_sphere(self, o, d, center, radius):
        oc = o - center
        b = np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - radius * radius
        disc = b * b - c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        ok &= t > 1e-9
        return np.where(ok, t, np.inf)

    def _hit_cube(self, o, d, center, half):
        lo, hi = center - half, center + half
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (lo - o) * inv
            t1 = (hi - o) * inv
        tmin = np.minimum(t0, t1).max(axis=1)
        tmax = np.maximum(t0, t1).min(axis=1)
        ok = (tmax > np.maximum(tmin, 1e-9)) & (tmin > 1e-9)
        return np.where(ok, tmin, np.inf)

    def _hit_walls(self, o, d):
        # interior of the enclosing box: exit distance
        h = self.preset.wall_half
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (-h - o) * inv
            t1 = (h - o) * inv
        tmax = np.maximum(t0, t1).min(axis=1)
        return np.where(tmax > 1e-9, tmax, np.inf)

    def trace(self, origins, dirs, time):
        """Nearest-hit shading: returns (rgb, depth, ids).

        ids: walls 0, sphere 1, cube 2, miss -1.  depth inf on miss.
        """
        origins = np.atleast_2d(origins).astype(np.float64)
        dirs = np.atleast_2d(dirs).astype(np.float64)
        n = len(dirs)
        depth = np.full(n, np.inf)
        ids = np.full(n, -1, dtype=np.int64)

        if self.has_sphere:
            c = self.sphere_center(time)
            ts = self._hit_sphere(origins, dirs, c, self.preset.sphere_radius)
            closer = ts < depth
            depth = np.where(closer, ts, depth)
            ids = np.where(closer, SPHERE_ID, ids)
        if self.has_cube:
            tc = self._hit_cube(origins, dirs, self.cube_center, self.preset.box_extents)
            closer = tc < depth
            depth = np.where(closer, tc, depth)
            ids = np.where(closer, CUBE_ID, ids)
        if self.preset.enclosed:
            tw = self._hit_walls(origins, dirs)
            closer = tw < depth
            depth = np.where(closer, tw, depth)
            ids = np.where(closer, WALL_ID, ids)

        rgb = np.zeros((n, 3))
        hitp = origins + depth[:, None] * dirs

        sel = ids == SPHERE_ID
        if sel.any():
            c = self.sphere_center(time)
            normal = (hitp[sel] - c) / self.preset.sphere_radius
            phi = np.arctan2(normal[:, 1], normal[:, 0])
            theta = np.arccos(np.clip(normal[:, 2], -1, 1))
            mix = 0.5 * (1.0 + np.sin(4.0 * phi) * np.sin(3.0 * theta))
            albedo = _SPHERE_C1 + mix[:, None] * (_SPHERE_C2 - _SPHERE_C1)
            rgb[sel] = self._shade(albedo, normal)
        sel = ids == CUBE_ID
        if sel.any():
            local = hitp[sel] - self.cube_center
            normal = _box_normal(local, self.preset.box_extents)
            rgb[sel] = self._shade(np.broadcast_to(_CUBE_COLOR, (sel.sum(), 3)), normal)
        sel = ids == WALL_ID
        if sel.any():
            p = hitp[sel]
            h = self.preset.wall_half
            face = np.argmax(np.abs(p) / h, axis=1)
            sign = np.sign(p[np.arange(len(p)), face])
            face_idx = face * 2 + (sign < 0)
            normal = np.zeros_like(p)
            normal[np.arange(len(p)), face] = -sign  # inward
            uv_axes = np.array([[1, 2], [0, 2], [0, 1]])[face]
            ua = p[np.arange(len(p)), uv_axes[:, 0]]
            va = p[np.arange(len(p)), uv_axes[:, 1]]
            check = ((np.floor(ua / _CHECKER_CELL) + np.floor(va / _CHECKER_CELL)) % 2).astype(bool)
            albedo = _WALL_COLORS[face_idx] * np.where(check[:, None], 0.72, 1.0)
            rgb[sel] = self._shade(albedo, normal)
        return np.clip(rgb, 0.0, 1.0), depth, ids

    def _shade(self, albedo, normal):
        lam = np.maximum(normal @ self.light, 0.0)
        return albedo * (_AMBIENT + (1.0 - _AMBIENT) * lam)[:, None]


def _box_normal(local, half):
    face = np.argmax(np.abs(local) / half, axis=1)
    normal = np.zeros_like(local)
    normal[np.arange(len(local)), face] = np.sign(local[np.arange(len(local)), face])
    return normal


def oracle_render(geometry: SceneGeometry, camera: Camera, time):
    """Ground-truth RGB/depth/object-id images for one camera and time."""
    uu, vv = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    dirs = pixel_directions(camera, uu.reshape(-1), vv.reshape(-1))
    origins = np.broadcast_to(camera.position, dirs.shape)
    rgb, depth, ids = geometry.trace(origins, dirs, time)
    h, w = camera.height, camera.width
    return (rgb.reshape(h, w, 3), depth.reshape(h, w), ids.reshape(h, w))


def object_prototypes(preset: SynthPreset):
    """Fixed random unit feature vectors, one per object id (walls included)."""
    rng = np.random.default_rng(preset.seed + 1000)
    protos = rng.standard_normal((3, preset.d_feat))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return protos.astype(np.float32)


# ---------------------------------------------------------------------------
# scene dataset


SCHEMA_VERSION = 1


@dataclass
class SceneDataset:
    """Calibrated multi-view video with ground-truth side channels."""

    root: Path
    frames: int
    cameras: list
    holdout_ids: list
    bbox_min: tuple
    bbox_max: tuple
    d_feat: int
    paths: dict          # kind -> cam_id -> [relpath per frame]
    prototypes: np.ndarray = None
    dynamic: list = None  # per-frame {center, radius} of the moving object
    preset: dict = None

    def __post_init__(self):
        self._cache = {}

    @property
    def train_cameras(self):
        return [c for c in self.cameras if c.cam_id not in self.holdout_ids]

    def camera(self, cam_id):
        for c in self.cameras:
            if c.cam_id == cam_id:
                return c
        raise KeyError(f"no camera {cam_id!r}")

    def _load(self, kind, cam_id, t, reader):
        key = (kind, cam_id, t)
        if key not in self._cache:
            try:
                rel = self.paths[kind][cam_id][t]
            except (KeyError, IndexError):
                raise FormatError(f"scene has no {kind} entry for ({cam_id}, t={t})")
            self._cache[key] = reader(self.root / rel)
            if len(self._cache) > 512:
                self._cache.pop(next(iter(self._cache)))
        return self._cache[key]

    def rgb(self, cam_id, t):
        return self._load("rgb", cam_id, t, read_ppm_float)

    def features(self, cam_id, t):
        return self._load("feat", cam_id, t, read_tensor)

    def object_ids(self, cam_id, t):
        return self._load("ids", cam_id, t, read_tensor).astype(np.int64)

    def depth(self, cam_id, t):
        return self._load("depth", cam_id, t, read_tensor)

    def dynamic_region(self, t):
        if not self.dynamic:
            return None
        d = self.dynamic[t]
        return np.asarray(d["center"]), d["radius"]


def synth_scene(preset: SynthPreset, out_dir) -> SceneDataset:
    """Generate and write a synthetic scene; returns the loaded dataset."""
    preset.validate()
    out = Path(out_dir)
    for sub in ("rgb", "feat", "ids", "depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    geom = SceneGeometry(preset)
    total = preset.camera_count + preset.holdout_count
    cams = camera_ring(total, preset.camera_radius, preset.camera_elevation,
                       (0.0, 0.0, 0.0), preset.fov_deg, preset.image_size,
                       preset.image_size)
    holdout = [c.cam_id for c in cams[preset.camera_count:]]
    protos = object_prototypes(preset)
    paths = {k: {c.cam_id: [] for c in cams} for k in ("rgb", "feat", "ids", "depth")}
    for cam in cams:
        for t in range(preset.frames):
            rgb, depth, ids = oracle_render(geom, cam, t)
            stem = f"{cam.cam_id}_t{t:03d}"
            rel = {"rgb": f"rgb/{stem}.ppm", "feat": f"feat/{stem}.gnrf",
                   "ids": f"ids/{stem}.gnrf", "depth": f"depth/{stem}.gnrf"}
            write_ppm(out / rel["rgb"], rgb)
            feat = np.zeros((*ids.shape, preset.d_feat), dtype=np.float32)
            hit = ids >= 0
            feat[hit] = protos[ids[hit]]
            write_tensor(out / rel["feat"], feat)
            write_tensor(out / rel["ids"], ids.astype(np.float32))
            write_tensor(out / rel["depth"], depth.astype(np.float32))
            for k in rel:
                paths[k][cam.cam_id].append(rel[k])
    lo, hi = geom.scene_bounds()
    dynamic = []
    for t in range(preset.frames):
        region = geom.dynamic_region(t)
        if region is not None:
            dynamic.append({"center": region[0].tolist(), "radius": region[1]})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "frames": preset.frames,
        "cameras": [c.to_dict() for c in cams],
        "holdout": holdout,
        "bbox_min": list(lo),
        "bbox_max": list(hi),
        "d_feat": preset.d_feat,
        "paths": paths,
        "prototypes": object_prototypes(preset).tolist(),
        "dynamic": dynamic,
        "preset": asdict(preset),
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return load_scene(out)


def load_scene(path) -> SceneDataset:
    """Load a manifest; validates schema, cameras and referenced files."""
    root = Path(path)
    manifest_path = root / "manifest.json" if root.is_dir() else root
    root = manifest_path.parent
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise FormatError(f"no manifest at {manifest_path}")
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path}: invalid JSON ({e})")
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise FormatError(f"{manifest_path}: unsupported schema version {version}")
    cameras = [Camera.from_dict(d) for d in manifest["cameras"]]
    paths = manifest["paths"]
    frames = manifest["frames"]
    for kind, per_cam in paths.items():
        for cam_id, rels in per_cam.items():
            if len(rels) != frames:
                raise FormatError(f"{kind}/{cam_id}: {len(rels)} paths for {frames} frames")
            for t, rel in enumerate(rels):
                if not (root / rel).exists():
                    raise FormatError(f"missing {kind} file for ({cam_id}, t={t}): {rel}")
    protos = manifest.get("prototypes")
    return SceneDataset(
        root=root,
        frames=frames,
        cameras=cameras,
        holdout_ids=list(manifest.get("holdout", [])),
        bbox_min=tuple(manifest["bbox_min"]),
        bbox_max=tuple(manifest["bbox_max"]),
        d_feat=manifest["d_feat"],
        paths=paths,
        prototypes=None if protos is None else np.asarray(protos, dtype=np.float32),
        dynamic=manifest.get("dynamic"),
        preset=manifest.get("preset"),
    )


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"GNCK"
_CKPT_VERSION = 1
_DT_TAGS = {"float32": "f32", "float64": "f64"}
_DT_FROM = {"f32": "<f4", "f64": "<f8"}


def save_checkpoint(model, path, cycle=0, rng_state=None):
    tensors = [(name, var.data) for name, var in model.named_params()]
    index = [{"name": n, "shape": list(a.shape), "dtype": _DT_TAGS[a.dtype.name]}
             for n, a in tensors]
    header = json.dumps({
        "config": model.config.to_dict(),
        "tensors": index,
        "cycle": cycle,
        "rng_state": rng_state,
    }).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<HI", _CKPT_VERSION, len(header)))
        f.write(header)
        for _, a in tensors:
            f.write(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path, expect=None, force=False):
    """Rebuild a model from disk.  `expect` maps config field -> demanded
    value; a mismatch raises ConfigConflictError unless `force` (file wins).
    Returns (model, cycle, rng_state)."""
    from .field import GearedModel, ModelConfig  # local import avoids a cycle
    from .numeric import Grid2D, LinearMap, TinyMLP
    from . import autodiff as ad

    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[10 : 10 + hlen].decode())
    config = ModelConfig.from_dict(header["config"])
    if expect:
        for key, want in expect.items():
            have = getattr(config, key)
            if have != want and not force:
                raise ConfigConflictError(
                    f"{path}: checkpoint has {key}={have}, requested {key}={want} "
                    "(pass force to use the file's value)")
    pos = 10 + hlen
    tensors = {}
    for entry in header["tensors"]:
        dt = np.dtype(_DT_FROM[entry["dtype"]])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dt.itemsize
        if pos + nbytes > len(blob):
            raise FormatError(f"{path}: truncated tensor payload at {entry['name']}")
        arr = np.frombuffer(blob[pos : pos + nbytes], dtype=dt).reshape(entry["shape"])
        tensors[entry["name"]] = np.ascontiguousarray(arr).astype(dt.newbyteorder("="))
        pos += nbytes

    def grid(name):
        a = tensors[name]
        return Grid2D(a.shape[0], a.shape[1], a.shape[2], ad.Var(a, requires_grad=True))

    spatial = [grid(f"spatial.{j}") for j in range(3)]
    st = [[grid(f"st.{g}.{j}") for j in range(3)] for g in range(1, config.n_gear + 1)]
    gear_h = [grid(f"gear_h.{j}") for j in range(3)]
    gear_k = [grid(f"gear_k.{j}") for j in range(3)]
    linear = [LinearMap(config.m, config.m,
                        ad.Var(tensors[f"linear.{j}.w"], requires_grad=True),
                        ad.Var(tensors[f"linear.{j}.b"], requires_grad=True))
              for j in range(3)]
    widths = [config.m + config.enc_width] + [config.hidden_width] * config.hidden_depth \
        + [4 + config.d_feat]
    n_layers = len(widths) - 1
    mlp = TinyMLP(widths,
                  [ad.Var(tensors[f"mlp.{li}.w"], requires_grad=True) for li in range(n_layers)],
                  [ad.Var(tensors[f"mlp.{li}.b"], requires_grad=True) for li in range(n_layers)],
                  config.d_feat)
    model = GearedModel(config, spatial, st, gear_h, gear_k, linear, mlp)
    return model, header.get("cycle", 0), header.get("rng_state")

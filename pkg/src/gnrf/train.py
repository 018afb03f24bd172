"""The alternating training procedure: radiance/semantic optimization epochs
interleaved with gear-assignment updates driven by rendering-loss maps.

One gear cycle:
  1. several Adam epochs on the combined photometric + semantic loss,
  2. probe renders -> per-pixel loss maps; stop when their variance settles,
  3. top-k loss patches -> point prompts -> upshift masks via the prompt
     decoder on ground-truth features,
  4. rays through masked pixels -> point sets -> one gradient-descent step
     pushing the gear field up inside the masks and holding it elsewhere.

After the loop, a longer tail of plain optimization epochs runs with gears
frozen.
"""

from __future__ import annotations

import json
import logging
import time as _time
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from . import autodiff as ad
from . import field as fld
from . import render as rnd
from .numeric import AdamState, adam_step
from .semantic import PointPrompt, Mask, decode_mask
from .metrics import psnr as psnr_metric, ssim as ssim_metric, MetricReport

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda_sem: float = 0.01      # semantic loss weight
    epochs_per_cycle: int = 3     # L
    final_epochs: int = 10        # L'
    topk: int = 3
    patch_size: int = 16
    lr: float = 0.02
    gear_lr: float = 0.02         # step size of the single gear-update step
    lambda_stay: float = 1.0
    v_stop: float = 2e-4          # loss-map variance threshold
    probe_views: int = 4
    probe_times: int = 4
    probe_stride: int = 2
    mask_stride: int = 4
    rays_per_batch: int = 2048
    n_samples: int = 64
    use_split: bool = True
    max_cycles: int = 50
    seed: int = 0
    workers: int = 0              # 0 = all available cores, capped at 8

    def __post_init__(self):
        for name in ("lambda_sem", "epochs_per_cycle", "final_epochs", "topk",
                     "patch_size", "lr", "gear_lr", "lambda_stay", "v_stop",
                     "probe_views", "probe_times", "probe_stride", "mask_stride",
                     "rays_per_batch", "n_samples", "max_cycles"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class UpshiftBatch:
    """Spacetime point sets collected from upshift masks and their complement."""

    points: np.ndarray        # [N_up, 3]
    times: np.ndarray
    gears: np.ndarray         # current p(x, t) per point
    stay_points: np.ndarray   # [N_stay, 3]
    stay_times: np.ndarray
    stay_gears: np.ndarray

    @property
    def n_upshift(self):
        return len(self.points)

    @property
    def n_stay(self):
        return len(self.stay_points)


def configure_workers(n=0):
    """Cap worker threads.  Returns the effective worker count.

    Parallelism lives in the numba kernels (which call single-threaded BLAS
    per tile), so the BLAS pool itself is pinned to one thread.
    """
    import os
    avail = os.cpu_count() or 1
    n = min(n or avail, avail, 8)
    ad.set_num_threads(n)
    try:
        import threadpoolctl
        global _BLAS_LIMIT
        _BLAS_LIMIT = threadpoolctl.threadpool_limits(limits=1, user_api="blas")
    except ImportError:
        pass
    return n


_BLAS_LIMIT = None


# ---------------------------------------------------------------------------
# losses


def photometric_loss(pred, truth):
    """Mean over rays of the squared color error. `pred` may be a Var."""
    if isinstance(pred, ad.Var):
        diff = ad.sub(pred, ad.Var(np.asarray(truth, dtype=pred.data.dtype)))
        return ad.scale(ad.vsum(ad.square(diff)), 1.0 / pred.data.shape[0])
    pred, truth = np.asarray(pred), np.asarray(truth)
    return float(((pred - truth) ** 2).sum() / pred.shape[0])


semantic_loss = photometric_loss  # identical form over D_feat-vectors


def upshift_loss(model, batch: UpshiftBatch, lambda_stay=1.0):
    """Mean squared pull of g(x,t) toward p+1 on upshift points and toward p
    on stay points; targets above the top gear clamp to it. Returns a Var."""
    if batch.n_upshift == 0:
        raise ValueError("empty upshift batch")
    dt = model.config.np_dtype
    g_up = fld.gear_value_rows(model, batch.points.astype(dt), batch.times.astype(dt))
    target = np.minimum(batch.gears + 1, model.config.n_gear).astype(dt)
    loss = ad.scale(ad.vsum(ad.square(ad.sub(g_up, ad.Var(target)))), 1.0 / batch.n_upshift)
    if batch.n_stay:
        g_st = fld.gear_value_rows(model, batch.stay_points.astype(dt),
                                   batch.stay_times.astype(dt))
        stay = ad.scale(ad.vsum(ad.square(ad.sub(g_st, ad.Var(batch.stay_gears.astype(dt))))),
                        1.0 / batch.n_stay)
        loss = ad.add(loss, ad.scale(stay, lambda_stay))
    return loss


def gear_update(model, batch: UpshiftBatch, alpha, lambda_stay=1.0):
    """Exactly one plain gradient-descent step on the gear planes."""
    gear_params = model.gear_params()
    for _, p in gear_params:
        p.zero_grad()
    loss = upshift_loss(model, batch, lambda_stay)
    ad.backward(loss)
    for _, p in gear_params:
        p.data -= alpha * p.grad.astype(p.data.dtype)
    return float(loss.data)


# ---------------------------------------------------------------------------
# loss maps and prompts


def bilinear_upsample(img, height, width):
    """Resize a 2-D map with bilinear interpolation (align-corners)."""
    h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()
    ys = np.linspace(0.0, h - 1.0, height)
    xs = np.linspace(0.0, w - 1.0, width)
    y0 = np.clip(ys.astype(int), 0, h - 2)
    x0 = np.clip(xs.astype(int), 0, w - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0 + 1, x0)]
    c = img[np.ix_(y0, x0 + 1)]
    d = img[np.ix_(y0 + 1, x0 + 1)]
    return (a * (1 - fy) * (1 - fx) + b * fy * (1 - fx)
            + c * (1 - fy) * fx + d * fy * fx)


def loss_map(model, scene, cam_id, t, lam, stride=2, n_samples=64, use_split=True):
    """Per-pixel rendering loss |dC|^2 + lam |dS|^2 at full resolution.

    Rendered at `stride`, compared against strided ground truth, then
    bilinearly upsampled.  Also returns the probe's PSNR for logging.
    """
    cam = scene.camera(cam_id)
    layers = rnd.render_layers(model, cam, t, layers=("rgb", "semantic"),
                               stride=stride, n_samples=n_samples, split=use_split)
    gt_rgb = scene.rgb(cam_id, t)[::stride, ::stride]
    gt_feat = scene.features(cam_id, t)[::stride, ::stride]
    err = ((layers.rgb - gt_rgb) ** 2).sum(axis=2) + lam * ((layers.semantic - gt_feat) ** 2).sum(axis=2)
    h, w = scene.rgb(cam_id, t).shape[:2]
    probe_psnr = psnr_metric(layers.rgb, gt_rgb)
    return bilinear_upsample(err, h, w), probe_psnr


def topk_patch_prompts(loss_map_img, patch_size, k):
    """Centers of the k highest/lowest mean-loss patches as +/- point prompts.

    The patch grid is non-overlapping with edge remainders dropped; ties
    resolve to the lower row-major patch index.  k is reduced (with a
    warning) when fewer than 2k patches exist.
    """
    h, w = loss_map_img.shape
    ph, pw = h // patch_size, w // patch_size
    if ph == 0 or pw == 0:
        raise ValueError("loss map smaller than the patch size")
    if ph * pw < 2 * k:
        k = (ph * pw) // 2
        log.warning("patch grid %dx%d too small; reducing top-k to %d", ph, pw, k)
    means = loss_map_img[: ph * patch_size, : pw * patch_size] \
        .reshape(ph, patch_size, pw, patch_size).mean(axis=(1, 3)).reshape(-1)
    order_hi = np.argsort(-means, kind="stable")
    order_lo = np.argsort(means, kind="stable")
    pos_idx = list(order_hi[:k])
    chosen = set(pos_idx)
    neg_idx = [i for i in order_lo if i not in chosen][:k]

    def center(flat):
        pr, pc = divmod(int(flat), pw)
        return (pc * patch_size + patch_size // 2, pr * patch_size + patch_size // 2)

    pos = [PointPrompt(*center(i), positive=True) for i in pos_idx]
    neg = [PointPrompt(*center(i), positive=False) for i in neg_idx]
    return pos, neg


def upshift_mask(scene, cam_id, t, prompts) -> Mask:
    """Prompt decoding over the ground-truth feature map for (view, time)."""
    return decode_mask(scene.features(cam_id, t), prompts)


def collect_point_sets(model, scene, masked, n, stride, rng) -> UpshiftBatch:
    """Sample ray points behind masked pixels (S_upshift) and an equal count
    behind randomly chosen unmasked pixels (S_stay), tagged with current gears.

    `masked` is a list of (cam_id, t, Mask).
    """
    cfg = model.config
    up_pos, up_t, st_pos, st_t = [], [], [], []
    for cam_id, t, mask in masked:
        if mask.empty:
            continue
        cam = scene.camera(cam_id)
        sub = np.zeros_like(mask.values)
        sub[::stride, ::stride] = True
        vs, us = np.nonzero(mask.values & sub)
        if len(us) == 0:
            vs, us = np.nonzero(mask.values)  # stride skipped everything: take all
        out_vs, out_us = np.nonzero(~mask.values)
        pick = rng.choice(len(out_us), size=min(len(us), len(out_us)), replace=False)
        for (uu, vv, bucket_p, bucket_t) in (
            (us, vs, up_pos, up_t),
            (out_us[pick], out_vs[pick], st_pos, st_t),
        ):
            batch = rnd.rays_for_pixels(cam, uu, vv, t, cfg.bbox_min, cfg.bbox_max)
            ok = batch.valid
            h = (batch.t_far[ok] - batch.t_near[ok]) / n
            ts = batch.t_near[ok, None] + (np.arange(n)[None, :] + 0.5) * h[:, None]
            pts = batch.origins[ok, None, :] + ts[:, :, None] * batch.dirs[ok, None, :]
            bucket_p.append(pts.reshape(-1, 3))
            bucket_t.append(np.full(pts.shape[0] * n, float(t)))
    if not up_pos:
        empty3, empty1 = np.zeros((0, 3)), np.zeros(0)
        return UpshiftBatch(empty3, empty1, empty1.astype(np.int64),
                            empty3.copy(), empty1.copy(), empty1.astype(np.int64))
    up_pos = np.concatenate(up_pos)
    up_t = np.concatenate(up_t)
    st_pos = np.concatenate(st_pos) if st_pos else np.zeros((0, 3))
    st_t = np.concatenate(st_t) if st_t else np.zeros(0)
    dt = cfg.np_dtype
    up_g = fld.gear_levels(model, up_pos.astype(dt), up_t.astype(dt))
    st_g = (fld.gear_levels(model, st_pos.astype(dt), st_t.astype(dt))
            if len(st_pos) else np.zeros(0, dtype=np.int64))
    return UpshiftBatch(up_pos, up_t, up_g, st_pos, st_t, st_g)


def gear_occupancy(model, res=16, times=8):
    """Histogram of gear levels over a regular (x, t) probe of the scene box."""
    cfg = model.config
    lo, hi = np.asarray(cfg.bbox_min), np.asarray(cfg.bbox_max)
    axes = [np.linspace(lo[i], hi[i], res) for i in range(3)]
    tt = np.linspace(0, cfg.frames - 1, min(times, cfg.frames))
    gx, gy, gz, gt = np.meshgrid(*axes, tt, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    lv = fld.gear_levels(model, pts.astype(cfg.np_dtype),
                         gt.reshape(-1).astype(cfg.np_dtype))
    counts = np.bincount(lv, minlength=cfg.n_gear + 1)[1:]
    return (counts / counts.sum()).tolist()


# ---------------------------------------------------------------------------
# the trainer


class Trainer:
    def __init__(self, model, scene, config: TrainConfig):
        self.model = model
        self.scene = scene
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.adam = AdamState.for_params([p.data for _, p in model.field_params()])
        self.log_records = []
        self._prepare_rays()

    def _prepare_rays(self):
        """Flatten every training ray's geometry and ground truth into arrays."""
        cfg = self.model.config
        scene = self.scene
        cams = scene.train_cameras
        dirs, origins, tnear, tfar, times, gt_rgb, gt_feat = [], [], [], [], [], [], []
        for cam in cams:
            h, w = cam.height, cam.width
            uu, vv = np.meshgrid(np.arange(w), np.arange(h))
            batch = rnd.rays_for_pixels(cam, uu.reshape(-1), vv.reshape(-1), 0.0,
                                        cfg.bbox_min, cfg.bbox_max)
            keep = batch.valid
            for t in range(scene.frames):
                dirs.append(batch.dirs[keep])
                origins.append(batch.origins[keep])
                tnear.append(batch.t_near[keep])
                tfar.append(batch.t_far[keep])
                times.append(np.full(keep.sum(), float(t)))
                gt_rgb.append(scene.rgb(cam.cam_id, t).reshape(-1, 3)[keep])
                gt_feat.append(scene.features(cam.cam_id, t).reshape(-1, scene.d_feat)[keep])
        self.ray_dirs = np.concatenate(dirs).astype(np.float64)
        self.ray_origins = np.concatenate(origins).astype(np.float64)
        self.ray_tnear = np.concatenate(tnear)
        self.ray_tfar = np.concatenate(tfar)
        self.ray_times = np.concatenate(times)
        self.gt_rgb = np.concatenate(gt_rgb).astype(np.float32)
        self.gt_feat = np.concatenate(gt_feat).astype(np.float32)
        self.n_rays = len(self.ray_dirs)

    def train_epoch(self):
        cfg = self.config
        mcfg = self.model.config
        order = self.rng.permutation(self.n_rays)
        params = self.model.field_params()
        datas = [p.data for _, p in params]
        total = 0.0
        nb = 0
        for lo in range(0, self.n_rays, cfg.rays_per_batch):
            idx = order[lo : lo + cfg.rays_per_batch]
            batch = rnd.RayBatch(self.ray_origins[idx], self.ray_dirs[idx],
                                 self.ray_tnear[idx], self.ray_tfar[idx],
                                 self.ray_times[idx], np.ones(len(idx), dtype=bool))
            flat = rnd.sample_batch(batch, self.model, cfg.n_samples,
                                    split=cfg.use_split, dtype=mcfg.np_dtype)
            sig, col, sem = fld.field_forward_rows(
                self.model, flat.pos, flat.times, flat.gear, batch.dirs,
                flat.ray_ids, flat.offsets)
            w, _ = ad.ray_weights(sig, flat.delta, flat.offsets)
            rgb = ad.weighted_ray_sum(w, col, flat.offsets)
            sem_img = ad.weighted_ray_sum(w, sem, flat.offsets)
            # black background: the residual-transmittance term vanishes, so
            # rgb is already the composited pixel color
            lp = photometric_loss(rgb, self.gt_rgb[idx])
            ls = semantic_loss(sem_img, self.gt_feat[idx])
            loss = ad.add(lp, ad.scale(ls, cfg.lambda_sem))
            if not np.isfinite(loss.data):
                self._abort_nonfinite()
            for _, p in params:
                p.zero_grad()
            ad.backward(loss)
            adam_step(datas, [p.grad for _, p in params], self.adam, cfg.lr)
            total += float(loss.data)
            nb += 1
        return total / max(nb, 1)

    def _abort_nonfinite(self):
        for name, p in self.model.named_params():
            if not np.isfinite(p.data).all():
                raise RuntimeError(f"non-finite values in parameter group {name}")
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise RuntimeError(f"non-finite gradient in parameter group {name}")
        raise RuntimeError("non-finite training loss")

    def probe_ids(self):
        cams = [c.cam_id for c in self.scene.train_cameras]
        vi = np.unique(np.linspace(0, len(cams) - 1, self.config.probe_views).astype(int))
        ti = np.unique(np.linspace(0, self.scene.frames - 1, self.config.probe_times).astype(int))
        return [cams[i] for i in vi], list(ti)

    def probe_loss_maps(self):
        cfg = self.config
        views, times = self.probe_ids()
        maps, psnrs = [], []
        for cam_id in views:
            for t in times:
                m, p = loss_map(self.model, self.scene, cam_id, t, cfg.lambda_sem,
                                stride=cfg.probe_stride, n_samples=cfg.n_samples,
                                use_split=cfg.use_split)
                maps.append((cam_id, t, m))
                psnrs.append(p)
        variance = float(np.mean([m.var() for _, _, m in maps]))
        return maps, variance, float(np.mean(psnrs))

    def gear_assignment_update(self, maps):
        cfg = self.config
        masked = []
        for cam_id, t, m in maps:
            pos, neg = topk_patch_prompts(m, cfg.patch_size, cfg.topk)
            if not pos:
                continue  # probe too small for the patch grid
            mask = upshift_mask(self.scene, cam_id, t, pos + neg)
            if not mask.empty:
                masked.append((cam_id, t, mask))
        if not masked:
            return None
        batch = collect_point_sets(self.model, self.scene, masked,
                                   cfg.n_samples, cfg.mask_stride, self.rng)
        if batch.n_upshift == 0:
            return None
        gear_update(self.model, batch, cfg.gear_lr, cfg.lambda_stay)
        return batch

    def train(self):
        """Run the full schedule; returns the training log (list of dicts)."""
        cfg = self.config
        t0 = _time.time()
        epoch_counter = 0
        cycles = 0
        upshift_batches = 0
        for cycle in range(cfg.max_cycles):
            cycles = cycle + 1
            for e in range(cfg.epochs_per_cycle):
                mean_loss = self.train_epoch()
                epoch_counter += 1
                self._log(kind="epoch", cycle=cycle, epoch=epoch_counter, loss=mean_loss)
            maps, variance, probe_psnr = self.probe_loss_maps()
            self._log(kind="cycle", cycle=cycle, epoch=epoch_counter,
                      variance=variance, psnr=probe_psnr,
                      gear_hist=gear_occupancy(self.model))
            if variance < cfg.v_stop:
                break
            batch = self.gear_assignment_update(maps)
            if batch is not None:
                upshift_batches += 1
                self._log(kind="gear_update", cycle=cycle, epoch=epoch_counter,
                          n_upshift=batch.n_upshift, n_stay=batch.n_stay)
        for e in range(cfg.final_epochs):
            mean_loss = self.train_epoch()
            epoch_counter += 1
            self._log(kind="epoch", cycle=-1, epoch=epoch_counter, loss=mean_loss)
        self._log(kind="done", cycles=cycles, epochs=epoch_counter,
                  upshift_batches=upshift_batches,
                  gear_hist=gear_occupancy(self.model),
                  wall_seconds=round(_time.time() - t0, 3))
        return self.log_records

    def _log(self, **record):
        self.log_records.append(record)
        log.info("%s", record)


def train(model, scene, config: TrainConfig):
    """Spec entry point: returns (model, training log)."""
    if len(scene.train_cameras) < 2:
        raise ValueError("training needs at least two views")
    configure_workers(config.workers)
    trainer = Trainer(model, scene, config)
    records = trainer.train()
    return model, records


def write_log(records, path):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


# ---------------------------------------------------------------------------
# held-out evaluation


def evaluate_holdout(model, scene, n_samples=64, stride=1):
    """PSNR/SSIM of every holdout camera over all frames vs ground truth."""
    report = MetricReport()
    for cam_id in scene.holdout_ids:
        cam = scene.camera(cam_id)
        for t in range(scene.frames):
            layers = rnd.render_layers(model, cam, t, layers=("rgb",),
                                       stride=stride, n_samples=n_samples)
            gt = scene.rgb(cam_id, t)[::stride, ::stride]
            report.psnr_per_frame.append(psnr_metric(layers.rgb, gt))
            report.ssim_per_frame.append(ssim_metric(layers.rgb, gt))
    return report

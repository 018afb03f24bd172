"""Image- and mask-quality metrics with batch aggregation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; +inf when the images are identical."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / mse))


_GRAY = np.array([0.299, 0.587, 0.114])


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r**2) / (2.0 * sigma**2))
    return k / k.sum()


def _filter_valid(img, kernel):
    # separable valid-mode convolution (symmetric kernel)
    tmp = np.apply_along_axis(lambda m: np.convolve(m, kernel, mode="valid"), 0, img)
    return np.apply_along_axis(lambda m: np.convolve(m, kernel, mode="valid"), 1, tmp)


def ssim(a, b, window=11, sigma=1.5, peak=1.0):
    """Single-scale SSIM over an 11x11 Gaussian window, mean of valid positions.

    RGB inputs are converted to luma first.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = a @ _GRAY
        b = b @ _GRAY
    if min(a.shape) < window:
        raise ValueError(f"image smaller than the {window}x{window} SSIM window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    k = _gaussian_window(window, sigma)
    mu_a = _filter_valid(a, k)
    mu_b = _filter_valid(b, k)
    va = _filter_valid(a * a, k) - mu_a**2
    vb = _filter_valid(b * b, k) - mu_b**2
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (va + vb + c2)
    return float(np.mean(num / den))


def mask_metrics(pred, truth):
    """(IoU, pixel accuracy).  IoU of two empty masks is 1 by convention."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    union = np.logical_or(pred, truth).sum()
    inter = np.logical_and(pred, truth).sum()
    iou = 1.0 if union == 0 else inter / union
    acc = np.mean(pred == truth)
    return float(iou), float(acc)


_PSNR_TEXT_CAP = 99.0


@dataclass
class MetricReport:
    """Held-out evaluation: per-frame image metrics plus mask metrics."""

    psnr_per_frame: list = field(default_factory=list)
    ssim_per_frame: list = field(default_factory=list)
    miou: float = None
    acc: float = None
    t_miou: float = None
    t_acc: float = None
    mask_frames: list = field(default_factory=list)
    lpips: str = "unavailable"  # requires a pretrained network; intentionally absent

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr_per_frame)) if self.psnr_per_frame else None

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim_per_frame)) if self.ssim_per_frame else None

    def add_frame(self, a, b):
        self.psnr_per_frame.append(psnr(a, b))
        self.ssim_per_frame.append(ssim(a, b))

    def to_dict(self):
        cap = lambda x: min(x, _PSNR_TEXT_CAP) if x is not None else None  # noqa: E731
        return {
            "psnr": [cap(p) for p in self.psnr_per_frame],
            "ssim": self.ssim_per_frame,
            "mean_psnr": cap(self.mean_psnr),
            "mean_ssim": self.mean_ssim,
            "miou": self.miou,
            "acc": self.acc,
            "t_miou": self.t_miou,
            "t_acc": self.t_acc,
            "mask_frames": self.mask_frames,
            "lpips": self.lpips,
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

"""PSNR, SSIM and mask metrics."""

import math

import numpy as np
import pytest

from gnrf.metrics import MetricReport, mask_metrics, psnr, ssim


class TestPSNR:
    def test_identical_is_infinite(self):
        img = np.random.default_rng(0).uniform(size=(8, 8, 3))
        assert psnr(img, img) == math.inf

    def test_uniform_difference(self):
        a = np.zeros((16, 16, 3))
        b = np.full((16, 16, 3), 0.1)
        assert psnr(a, b) == pytest.approx(20.0)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
        assert psnr(a, b) == pytest.approx(psnr(b, a))

    def test_monotone_in_mse(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(size=(8, 8, 3))
        noise = rng.standard_normal(a.shape)
        values = [psnr(a, a + eps * noise) for eps in (0.01, 0.02, 0.05, 0.1)]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_report_caps_infinite_to_99(self):
        report = MetricReport(psnr_per_frame=[math.inf, 30.0])
        assert report.to_dict()["psnr"][0] == 99.0


class TestSSIM:
    def test_self_similarity_is_one(self):
        img = np.random.default_rng(3).uniform(size=(16, 16, 3))
        assert ssim(img, img) == pytest.approx(1.0)

    def test_contrast_inversion_negative(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(size=(16, 16))
        mean = a.mean()
        assert ssim(a, 2 * mean - a) < 0

    def test_too_small_image(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_matches_direct_windowed_reference(self):
        # independent straightforward implementation with explicit windows
        rng = np.random.default_rng(5)
        a = rng.uniform(size=(16, 16))
        b = np.clip(a + 0.1 * rng.standard_normal((16, 16)), 0, 1)

        r = np.arange(11) - 5
        g1 = np.exp(-(r**2) / (2 * 1.5**2))
        g1 /= g1.sum()
        win = np.outer(g1, g1)
        c1, c2 = 0.01**2, 0.03**2
        vals = []
        for i in range(16 - 10):
            for j in range(16 - 10):
                pa = a[i:i + 11, j:j + 11]
                pb = b[i:i + 11, j:j + 11]
                mua = (win * pa).sum()
                mub = (win * pb).sum()
                va = (win * pa * pa).sum() - mua**2
                vb = (win * pb * pb).sum() - mub**2
                cov = (win * pa * pb).sum() - mua * mub
                vals.append(((2 * mua * mub + c1) * (2 * cov + c2))
                            / ((mua**2 + mub**2 + c1) * (va + vb + c2)))
        assert ssim(a, b) == pytest.approx(np.mean(vals), rel=1e-10)

    def test_rgb_uses_luma(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(size=(16, 16, 3))
        b = rng.uniform(size=(16, 16, 3))
        gray = np.array([0.299, 0.587, 0.114])
        assert ssim(a, b) == pytest.approx(ssim(a @ gray, b @ gray))


class TestMaskMetrics:
    def test_identical(self):
        m = np.random.default_rng(7).random((8, 8)) < 0.5
        assert mask_metrics(m, m) == (1.0, 1.0)

    def test_disjoint_halves(self):
        pred = np.zeros((4, 4), dtype=bool)
        truth = np.zeros((4, 4), dtype=bool)
        pred[:2] = True
        truth[2:] = True
        iou, acc = mask_metrics(pred, truth)
        assert iou == 0.0 and acc == 0.0

    def test_half_of_truth(self):
        truth = np.zeros((4, 4), dtype=bool)
        truth[:2] = True  # half the image
        pred = np.zeros((4, 4), dtype=bool)
        pred[0] = True  # half of truth
        iou, acc = mask_metrics(pred, truth)
        assert iou == pytest.approx(0.5)
        assert acc == pytest.approx(0.75)

    def test_both_empty_is_perfect(self):
        z = np.zeros((4, 4), dtype=bool)
        assert mask_metrics(z, z) == (1.0, 1.0)

    def test_iou_symmetric_acc_complement_invariant(self):
        rng = np.random.default_rng(8)
        a = rng.random((8, 8)) < 0.4
        b = rng.random((8, 8)) < 0.6
        assert mask_metrics(a, b)[0] == mask_metrics(b, a)[0]
        assert mask_metrics(a, b)[1] == pytest.approx(mask_metrics(~a, ~b)[1])

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            mask_metrics(np.zeros((2, 2), dtype=bool), np.zeros((3, 2), dtype=bool))


class TestReport:
    def test_means_equal_arithmetic_means(self):
        report = MetricReport(psnr_per_frame=[20.0, 30.0], ssim_per_frame=[0.8, 0.9])
        assert report.mean_psnr == pytest.approx(25.0)
        assert report.mean_ssim == pytest.approx(0.85)

    def test_json_carries_lpips_unavailable(self):
        report = MetricReport()
        assert '"lpips": "unavailable"' in report.to_json()

"""Feature providers and the similarity-growing prompt decoder."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gnrf.metrics import mask_metrics
from gnrf.sceneio import SPHERE_ID, preset_by_name, synth_scene
from gnrf.semantic import (BoxPrompt, DiskFeatureProvider, Mask, PointPrompt,
                           SyntheticFeatureProvider, decode_mask, provide_features)


def two_region_image(d=4, size=12, split=6):
    """Left region A, right region B, constant distinct unit features."""
    a = np.zeros(d); a[0] = 1.0
    b = np.zeros(d); b[1] = 1.0
    img = np.empty((size, size, d))
    img[:, :split] = a
    img[:, split:] = b
    return img


class TestDecodeMask:
    def test_positive_point_selects_exact_region(self):
        img = two_region_image()
        mask = decode_mask(img, [PointPrompt(2, 3, True)])
        want = np.zeros((12, 12), dtype=bool)
        want[:, :6] = True
        np.testing.assert_array_equal(mask.values, want)

    def test_identical_negative_gives_empty(self):
        img = two_region_image()
        mask = decode_mask(img, [PointPrompt(2, 3, True), PointPrompt(4, 5, False)])
        assert mask.empty  # strict inequality: ties go to exclusion

    def test_negative_never_grows_mask(self):
        rng = np.random.default_rng(0)
        img = rng.standard_normal((16, 16, 6))
        base = decode_mask(img, [PointPrompt(8, 8, True)], tau=0.3)
        for _ in range(10):
            u, v = rng.integers(0, 16, size=2)
            neg = decode_mask(img, [PointPrompt(8, 8, True), PointPrompt(int(u), int(v), False)],
                              tau=0.3)
            assert not (neg.values & ~base.values).any()

    def test_requires_positive_prompt(self):
        img = two_region_image()
        with pytest.raises(ValueError):
            decode_mask(img, [PointPrompt(2, 3, False)])

    def test_prompt_bounds_checked(self):
        img = two_region_image()
        with pytest.raises(ValueError):
            decode_mask(img, [PointPrompt(99, 0, True)])

    def test_components_each_contain_a_seed(self):
        # two disconnected blobs with the same feature: only the seeded one returned
        d = 3
        img = np.zeros((10, 10, d))
        img[..., 2] = 1.0
        blob = np.zeros(d); blob[0] = 1.0
        img[1:3, 1:3] = blob
        img[7:9, 7:9] = blob
        mask = decode_mask(img, [PointPrompt(1, 1, True)])
        assert mask.values[1:3, 1:3].all()
        assert not mask.values[7:9, 7:9].any()

    def test_matches_bruteforce_component_oracle(self):
        # piecewise-constant random regions; grow from one positive point
        rng = np.random.default_rng(3)
        for trial in range(10):
            d = 8
            size = rng.integers(6, 32)
            while True:  # the property requires pairwise similarity below tau
                protos = rng.standard_normal((5, d))
                protos /= np.linalg.norm(protos, axis=1, keepdims=True)
                sims = protos @ protos.T - np.eye(5)
                if sims.max() < 0.85:
                    break
            labels = rng.integers(0, 5, size=(size, size))
            img = protos[labels]
            u, v = int(rng.integers(0, size)), int(rng.integers(0, size))
            mask = decode_mask(img, [PointPrompt(u, v, True)])
            # brute-force BFS over 4-connected same-label pixels
            want = np.zeros((size, size), dtype=bool)
            stack = [(v, u)]
            target = labels[v, u]
            while stack:
                y, x = stack.pop()
                if not (0 <= y < size and 0 <= x < size) or want[y, x]:
                    continue
                if labels[y, x] != target:
                    continue
                want[y, x] = True
                stack.extend([(y + 1, x), (y - 1, x), (y, x + 1), (y, x - 1)])
            np.testing.assert_array_equal(mask.values, want, err_msg=f"trial {trial}")

    def test_box_prompt_on_synthetic_sphere(self, tmp_path):
        preset = preset_by_name("orbiting-sphere", frames=2, image_size=32,
                                camera_count=2, holdout_count=1)
        scene = synth_scene(preset, tmp_path / "s")
        feats = scene.features("cam00", 0)
        gt = scene.object_ids("cam00", 0) == SPHERE_ID
        ys, xs = np.nonzero(gt)
        box = BoxPrompt(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        mask = decode_mask(feats, [box])
        iou, _ = mask_metrics(mask.values, gt)
        assert iou >= 0.95

    def test_box_clips_growth(self):
        img = two_region_image(size=12, split=6)  # region A spans columns 0..5
        box = BoxPrompt(0, 4, 4, 8)  # dilated by 25% -> columns 0..4, rows 3..8
        mask = decode_mask(img, [box])
        assert not mask.empty
        ys, xs = np.nonzero(mask.values)
        assert xs.max() <= 4 and ys.min() >= 3 and ys.max() <= 8

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            BoxPrompt(3, 3, 3, 5)


class TestMaskType:
    def test_rle_round_trip_random(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            h, w = rng.integers(1, 16, size=2)
            values = rng.random((h, w)) < rng.random()
            mask = Mask(values)
            back = Mask.from_rle(mask.rle(), w, h)
            np.testing.assert_array_equal(back.values, values)

    @settings(max_examples=100)
    @given(st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**32 - 1))
    def test_rle_round_trip_property(self, w, h, seed):
        rng = np.random.default_rng(seed)
        values = rng.random((h, w)) < 0.4
        mask = Mask(values)
        back = Mask.from_rle(mask.rle(), w, h)
        np.testing.assert_array_equal(back.values, values)

    def test_rle_runs_sorted_disjoint(self):
        rng = np.random.default_rng(2)
        values = rng.random((8, 8)) < 0.5
        runs = Mask(values).rle()
        for (s1, l1), (s2, l2) in zip(runs, runs[1:]):
            assert s1 + l1 < s2  # disjoint with a gap (else they'd be one run)

    def test_invalid_rle_rejected(self):
        with pytest.raises(ValueError):
            Mask.from_rle([(60, 10)], 8, 8)

    def test_bbox(self):
        values = np.zeros((6, 6), dtype=bool)
        values[2:4, 1:5] = True
        assert Mask(values).bbox() == (1, 2, 5, 4)
        assert Mask(np.zeros((3, 3), dtype=bool)).bbox() is None


class TestProviders:
    def test_synthetic_provider_matches_prototypes(self, tmp_path):
        preset = preset_by_name("orbiting-sphere", frames=2, image_size=24,
                                camera_count=2, holdout_count=1)
        scene = synth_scene(preset, tmp_path / "s")
        provider = SyntheticFeatureProvider(preset)
        cam = scene.cameras[0]
        fm = provide_features(provider, cam, 0)
        ids = scene.object_ids(cam.cam_id, 0)
        on = ids == SPHERE_ID
        assert np.abs(fm[on] - provider.prototypes[SPHERE_ID]).max() == 0.0

    def test_static_frames_identical(self, tmp_path):
        preset = preset_by_name("static-box", frames=3, image_size=16,
                                camera_count=2, holdout_count=1)
        scene = synth_scene(preset, tmp_path / "s")
        provider = SyntheticFeatureProvider(preset)
        cam = scene.cameras[0]
        np.testing.assert_array_equal(provide_features(provider, cam, 0),
                                      provide_features(provider, cam, 2))

    def test_disk_provider_round_trips(self, tmp_path):
        preset = preset_by_name("orbiting-sphere", frames=2, image_size=16,
                                camera_count=2, holdout_count=1)
        scene = synth_scene(preset, tmp_path / "s")
        disk = DiskFeatureProvider(scene)
        synth = SyntheticFeatureProvider(preset)
        cam = scene.cameras[1]
        np.testing.assert_allclose(provide_features(disk, cam.cam_id, 1),
                                   provide_features(synth, cam, 1), atol=1e-7)

    def test_disk_provider_missing_entry(self, tmp_path):
        preset = preset_by_name("static-box", frames=1, image_size=16,
                                camera_count=2, holdout_count=1)
        scene = synth_scene(preset, tmp_path / "s")
        disk = DiskFeatureProvider(scene)
        from gnrf.sceneio import FormatError
        with pytest.raises(FormatError, match="nope"):
            disk.features("nope", 0)

    def test_disk_provider_downscale(self, tmp_path):
        preset = preset_by_name("static-box", frames=1, image_size=16,
                                camera_count=2, holdout_count=1)
        scene = synth_scene(preset, tmp_path / "s")
        full = DiskFeatureProvider(scene).features("cam00", 0)
        half = DiskFeatureProvider(scene, downscale=2).features("cam00", 0)
        np.testing.assert_array_equal(half, full[::2, ::2])

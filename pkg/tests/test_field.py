"""The gear-stratified field: projection, mixing, sharing, temporal layout."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gnrf import autodiff as ad
from gnrf.field import (GearedModel, ModelConfig, SpaceTimePoint, dir_encoding,
                        field_eval, field_forward_rows, _field_forward_modular,
                        gear_feature, gear_feature_rows, gear_level,
                        gear_level_of, gear_levels, gear_value, gear_values,
                        mixed_feature, temporal_resolution)


def micro_model(n_gear=2, m=4, seed=0, **kw):
    defaults = dict(d_feat=2, spatial_res=4, frames=4, dir_freqs=1,
                    hidden_width=6, hidden_depth=2, dtype="f64")
    defaults.update(kw)
    cfg = ModelConfig(n_gear=n_gear, m=m, **defaults)
    return GearedModel.create(cfg, np.random.default_rng(seed))


class TestProjection:
    def test_spec_cases(self):
        gs = np.array([-5, 0, 0.5, 1.0, 1.2, 2.0, 2.3, 3.7, 4.0, 9.0])
        expect = np.array([1, 1, 1, 1, 2, 2, 3, 4, 4, 4])
        np.testing.assert_array_equal(gear_level_of(gs, 4), expect)

    @given(st.floats(-1e9, 1e9), st.integers(1, 8))
    def test_range(self, g, n_gear):
        level = gear_level_of(np.array([g]), n_gear)[0]
        assert 1 <= level <= n_gear

    @given(st.floats(-10, 10))
    def test_matches_piecewise_definition(self, g):
        n_gear = 4
        if g < 1:
            want = 1
        elif g >= n_gear:
            want = n_gear
        else:
            want = int(np.ceil(g))
        assert gear_level_of(np.array([g]), n_gear)[0] == want


class TestTemporalResolution:
    def test_endpoints(self):
        assert temporal_resolution(1, 100, 4) == 1
        assert temporal_resolution(4, 100, 4) == 100

    def test_interior_value(self):
        # 1 + (1/3) * 99 = 34
        assert temporal_resolution(2, 100, 4) == 34

    def test_single_gear_uses_full_frames(self):
        assert temporal_resolution(1, 50, 1) == 50

    @given(st.integers(1, 200), st.integers(2, 8))
    def test_monotone_with_exact_endpoints(self, frames, n_gear):
        res = [temporal_resolution(g, frames, n_gear) for g in range(1, n_gear + 1)]
        assert res[0] == 1
        assert res[-1] == frames
        assert all(a <= b for a, b in zip(res, res[1:]))


class TestGearField:
    def test_initial_gear_is_one_everywhere(self):
        for m in (3, 4, 32):  # includes a non-power-of-two channel count
            model = micro_model(n_gear=4, m=m)
            rng = np.random.default_rng(1)
            pts = rng.uniform(-1, 1, size=(500, 3))
            ts = rng.uniform(0, 3, size=500)
            assert (gear_levels(model, pts, ts) == 1).all()
            assert gear_values(model, pts, ts).max() <= 1.0

    def test_zero_gear_planes_give_zero(self):
        model = micro_model()
        for pl in model.gear_spatial_planes + model.gear_st_planes:
            pl.values.data[:] = 0
        assert gear_value(model, SpaceTimePoint(np.zeros(3), 1.0)) == 0.0

    def test_constant_field_construction(self):
        # h' = 1, k' = c/(3M) per channel -> g = c
        model = micro_model(m=4)
        c = 2.5
        for pl in model.gear_spatial_planes:
            pl.values.data[:] = 1.0
        for pl in model.gear_st_planes:
            pl.values.data[:] = c / (3 * 4)
        g = gear_value(model, SpaceTimePoint(np.array([0.3, -0.2, 0.5]), 1.7))
        assert g == pytest.approx(c, rel=1e-6)

    def test_matches_scalar_reevaluation(self):
        model = micro_model(seed=3)
        rng = np.random.default_rng(4)
        for pl in model.gear_spatial_planes + model.gear_st_planes:
            pl.values.data[:] = rng.standard_normal(pl.values.data.shape)
        p = SpaceTimePoint(np.array([0.31, -0.44, 0.12]), 1.3)
        # independent evaluation from bilinear first principles
        from gnrf.numeric import bilinear_sample
        n, tn = model.normalize(p.x[None], np.array([p.t]))
        coords = [((n[0, 0], n[0, 1]), (n[0, 2], tn[0])),
                  ((n[0, 0], n[0, 2]), (n[0, 1], tn[0])),
                  ((n[0, 1], n[0, 2]), (n[0, 0], tn[0]))]
        want = 0.0
        for j, ((u1, v1), (u2, v2)) in enumerate(coords):
            h = bilinear_sample(model.gear_spatial_planes[j], u1, v1)
            k = bilinear_sample(model.gear_st_planes[j], u2, v2)
            want += float((h * k).sum())
        assert gear_value(model, p) == pytest.approx(want, rel=1e-10)


class TestGearFeature:
    def test_zero_st_plane_leaves_bias_sum(self):
        model = micro_model()
        for pl in model.st_planes[0]:
            pl.values.data[:] = 0
        feat = gear_feature(model, 1, SpaceTimePoint(np.zeros(3), 0.0))
        want = sum(lm.bias.data for lm in model.linear_maps)
        np.testing.assert_allclose(feat, want, atol=1e-12)

    def test_unit_spatial_identity_linear(self):
        model = micro_model(m=4)
        for j, lm in enumerate(model.linear_maps):
            lm.weights.data[:] = np.eye(4)
            lm.bias.data[:] = 0
        for pl in model.spatial_planes:
            pl.values.data[:] = 1.0
        p = SpaceTimePoint(np.array([0.2, 0.4, -0.3]), 2.0)
        feat = gear_feature(model, 1, p)
        from gnrf.numeric import bilinear_sample
        n, tn = model.normalize(p.x[None], np.array([p.t]))
        want = np.zeros(4)
        for j, c in enumerate((n[0, 2], n[0, 1], n[0, 0])):
            want += bilinear_sample(model.st_planes[0][j], c, tn[0])
        np.testing.assert_allclose(feat, want, rtol=1e-6)

    def test_scalar_oracle(self):
        model = micro_model(seed=5)
        p = SpaceTimePoint(np.array([0.5, 0.5, 0.5]), 1.5)
        from gnrf.numeric import bilinear_sample
        n, tn = model.normalize(p.x[None], np.array([p.t]))
        coords = [((n[0, 0], n[0, 1]), (n[0, 2], tn[0])),
                  ((n[0, 0], n[0, 2]), (n[0, 1], tn[0])),
                  ((n[0, 1], n[0, 2]), (n[0, 0], tn[0]))]
        want = np.zeros(model.config.m)
        for j, ((u1, v1), (u2, v2)) in enumerate(coords):
            h = bilinear_sample(model.spatial_planes[j], u1, v1)
            k = bilinear_sample(model.st_planes[1][j], u2, v2)
            want += model.linear_maps[j].weights.data @ (h * k) + model.linear_maps[j].bias.data
        np.testing.assert_allclose(gear_feature(model, 2, p), want, rtol=1e-8)

    def test_gear_out_of_range(self):
        model = micro_model()
        with pytest.raises(ValueError):
            gear_feature_rows(model, 3, np.zeros((1, 3)), np.zeros(1))


class TestMixing:
    def _mixed_gear_model(self):
        model = micro_model(n_gear=3, seed=7)
        model.gear_st_planes[0].values.data[:2] += 1.2  # push part of space up
        return model

    def test_single_gear_collapses(self):
        model = micro_model(n_gear=1)
        p = SpaceTimePoint(np.array([0.1, 0.2, 0.3]), 1.0)
        np.testing.assert_array_equal(mixed_feature(model, p), gear_feature(model, 1, p))

    def test_mixed_equals_selected_gear_bitwise(self):
        model = self._mixed_gear_model()
        rng = np.random.default_rng(8)
        for _ in range(50):
            p = SpaceTimePoint(rng.uniform(-1, 1, 3), rng.uniform(0, 3))
            np.testing.assert_array_equal(
                mixed_feature(model, p), gear_feature(model, gear_level(model, p), p))

    def test_one_hot_masked_sum_equals_mixed(self):
        model = self._mixed_gear_model()
        rng = np.random.default_rng(9)
        pts = rng.uniform(-1, 1, size=(20, 3))
        ts = rng.uniform(0, 3, size=20)
        levels = gear_levels(model, pts, ts)
        assert len(np.unique(levels)) > 1, "test needs mixed gears"
        # brute-force masked sum over all gears
        total = np.zeros((20, model.config.m))
        for g in range(1, model.config.n_gear + 1):
            mask = (levels == g).astype(float)[:, None]
            total += mask * gear_feature_rows(model, g, pts, ts).data
        from gnrf.field import mixed_feature_rows
        np.testing.assert_allclose(mixed_feature_rows(model, pts, ts, levels).data,
                                   total, atol=1e-12)

    def test_masks_are_one_hot(self):
        model = self._mixed_gear_model()
        rng = np.random.default_rng(10)
        pts = rng.uniform(-1, 1, size=(200, 3))
        ts = rng.uniform(0, 3, size=200)
        levels = gear_levels(model, pts, ts)
        onehot = np.stack([(levels == g) for g in range(1, model.config.n_gear + 1)])
        assert (onehot.sum(axis=0) == 1).all()


class TestSharing:
    def test_st_plane_mutation_is_gear_local(self):
        model = micro_model(n_gear=3, seed=11)
        rng = np.random.default_rng(12)
        pts = rng.uniform(-1, 1, size=(30, 3))
        ts = rng.uniform(0, 3, size=30)
        before = {g: gear_feature_rows(model, g, pts, ts).data.copy() for g in (1, 2, 3)}
        model.st_planes[1][0].values.data += 0.5  # mutate gear 2 only
        after = {g: gear_feature_rows(model, g, pts, ts).data for g in (1, 2, 3)}
        np.testing.assert_array_equal(before[1], after[1])
        np.testing.assert_array_equal(before[3], after[3])
        assert not np.array_equal(before[2], after[2])

    def test_spatial_plane_mutation_hits_all_gears(self):
        model = micro_model(n_gear=2, seed=13)
        rng = np.random.default_rng(14)
        # nonzero st planes so the product responds
        pts = rng.uniform(-1, 1, size=(30, 3))
        ts = rng.uniform(0, 3, size=30)
        before = {g: gear_feature_rows(model, g, pts, ts).data.copy() for g in (1, 2)}
        model.spatial_planes[0].values.data += 0.5
        for g in (1, 2):
            assert not np.array_equal(before[g], gear_feature_rows(model, g, pts, ts).data)


class TestFieldEval:
    def test_head_activations(self):
        model = micro_model()
        for w in model.mlp.weights:
            w.data[:] = 0
        for b in model.mlp.biases:
            b.data[:] = 0
        sigma, color, sem = field_eval(model, SpaceTimePoint(np.zeros(3), 0.0),
                                       np.array([0.0, 0.0, 1.0]))
        assert sigma == pytest.approx(np.log(2.0))     # softplus(0)
        np.testing.assert_allclose(color, 0.5)         # sigmoid(0)
        np.testing.assert_allclose(sem, 0.0)

    def test_matches_scalar_composition(self):
        model = micro_model(seed=15)
        p = SpaceTimePoint(np.array([0.2, -0.6, 0.4]), 2.2)
        d = np.array([0.6, 0.0, 0.8])
        sigma, color, sem = field_eval(model, p, d)
        from gnrf.numeric import mlp_forward
        from gnrf.field import mixed_feature
        feat = mixed_feature(model, p)
        enc = dir_encoding(d[None], model.config.dir_freqs)[0]
        s_raw, c_raw, f_raw = mlp_forward(model.mlp, feat, enc)
        assert sigma == pytest.approx(np.logaddexp(0, s_raw), rel=1e-9)
        np.testing.assert_allclose(color, 1 / (1 + np.exp(-c_raw)), rtol=1e-9)
        np.testing.assert_allclose(sem, f_raw, rtol=1e-9)

    def test_fused_and_modular_paths_agree(self):
        model = micro_model(n_gear=3, seed=16)
        model.gear_st_planes[1].values.data[:2] += 1.0
        rng = np.random.default_rng(17)
        P, R = 40, 8
        xs = rng.uniform(-1, 1, size=(P, 3))
        ts = rng.uniform(0, 3, size=P)
        gears = gear_levels(model, xs, ts)
        dirs = rng.standard_normal((R, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        ray_ids = np.repeat(np.arange(R), P // R)
        offsets = (np.arange(R + 1) * (P // R)).astype(np.int64)
        out_f = field_forward_rows(model, xs, ts, gears, dirs, ray_ids, offsets)
        out_m = _field_forward_modular(model, xs, ts, gears, dirs, ray_ids, offsets)
        for a, b in zip(out_f, out_m):
            np.testing.assert_allclose(a.data, b.data, rtol=1e-12, atol=1e-14)


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            ModelConfig(n_gear=0)
        with pytest.raises(ValueError):
            ModelConfig(split_strategy="exp7")

    def test_dict_round_trip(self):
        cfg = ModelConfig(n_gear=3, frames=10)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_st_plane_resolution_matches_rule(self):
        model = micro_model(n_gear=4, frames=24)
        for g in range(1, 5):
            want = temporal_resolution(g, 24, 4)
            for pl in model.st_planes[g - 1]:
                assert pl.resolution_v == want

    def test_direction_encoding_width(self):
        enc = dir_encoding(np.array([[0.0, 0.6, 0.8]]), freqs=4)
        assert enc.shape == (1, 24)

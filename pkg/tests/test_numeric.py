"""Grids, bilinear interpolation, the MLP and Adam."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gnrf import autodiff as ad
from gnrf.numeric import (AdamState, Grid2D, LinearMap, TinyMLP, adam_step,
                          bilinear_sample, bilinear_weights, mlp_forward)


class TestBilinear:
    def test_constant_grid_returns_constant_exactly(self):
        grid = Grid2D.constant(5, 4, 3, 0.7371, dtype=np.float64)
        rng = np.random.default_rng(0)
        for _ in range(200):
            out = bilinear_sample(grid, rng.random(), rng.random())
            assert (out == 0.7371).all()

    def test_node_exactness(self):
        vals = np.arange(4, dtype=np.float64).reshape(2, 2, 1)
        grid = Grid2D(2, 2, 1, ad.Var(vals))
        assert bilinear_sample(grid, 0.0, 0.0)[0] == vals[0, 0, 0]
        assert bilinear_sample(grid, 1.0, 0.0)[0] == vals[1, 0, 0]
        assert bilinear_sample(grid, 0.0, 1.0)[0] == vals[0, 1, 0]
        assert bilinear_sample(grid, 1.0, 1.0)[0] == vals[1, 1, 0]

    def test_center_of_2x2_is_mean(self):
        # layout: values[u, v]; corners (0,0)=0, (1,0)=1, (0,1)=2, (1,1)=3
        vals = np.zeros((2, 2, 1))
        vals[0, 0, 0], vals[1, 0, 0], vals[0, 1, 0], vals[1, 1, 0] = 0, 1, 2, 3
        grid = Grid2D(2, 2, 1, ad.Var(vals))
        assert bilinear_sample(grid, 0.5, 0.5)[0] == pytest.approx(1.5, abs=1e-15)

    def test_out_of_range_rejected(self):
        grid = Grid2D.constant(2, 2, 1, 0.0)
        with pytest.raises(ValueError):
            bilinear_sample(grid, -0.01, 0.5)
        with pytest.raises(ValueError):
            bilinear_sample(grid, 0.5, 1.01)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_partition_of_unity_exact(self, u, v):
        _, weights = bilinear_weights(u, v, 7, 5)
        assert np.sum(np.asarray(weights)) == 1.0

    def test_single_axis_grid_constant_along_it(self):
        vals = np.array([[[1.0], [5.0]]])  # resolution_u == 1
        grid = Grid2D(1, 2, 1, ad.Var(vals))
        for u in (0.0, 0.3, 1.0):
            assert bilinear_sample(grid, u, 0.0)[0] == 1.0
            assert bilinear_sample(grid, u, 1.0)[0] == 5.0


class TestMLP:
    def test_zero_network_outputs_zero(self):
        mlp = TinyMLP.random(6, [8], 4 + 2, 2, np.random.default_rng(0))
        for w in mlp.weights:
            w.data[:] = 0
        for b in mlp.biases:
            b.data[:] = 0
        s, c, f = mlp_forward(mlp, np.ones(3), np.ones(3))
        assert s == 0 and (c == 0).all() and (f == 0).all()

    def test_identity_single_layer(self):
        mlp = TinyMLP.random(6, [], 6, 2, np.random.default_rng(0))
        mlp.weights[0].data[:] = np.eye(6)
        mlp.biases[0].data[:] = 0
        x = np.arange(6.0)
        s, c, f = mlp_forward(mlp, x[:3], x[3:])
        np.testing.assert_array_equal(np.concatenate([[s], c, f]), x)

    def test_matches_straight_line_reevaluation(self):
        rng = np.random.default_rng(1)
        mlp = TinyMLP.random(5, [7, 7], 4 + 3, 3, rng, dtype=np.float64)
        feat, enc = rng.standard_normal(3), rng.standard_normal(2)
        s, c, f = mlp_forward(mlp, feat, enc)
        # independent scalar evaluation
        h = np.concatenate([feat, enc])
        for li, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            h = w.data @ h + b.data
            if li < len(mlp.weights) - 1:
                h[h < 0] = 0
        assert s == pytest.approx(h[0])
        np.testing.assert_allclose(c, h[1:4])
        np.testing.assert_allclose(f, h[4:])

    def test_width_mismatch_raises(self):
        mlp = TinyMLP.random(6, [4], 6, 2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            mlp_forward(mlp, np.ones(2), np.ones(2))


class TestAdam:
    def test_zero_grad_no_motion(self):
        p = np.array([1.0, -2.0])
        state = AdamState.for_params([p])
        adam_step([p], [np.zeros(2)], state, lr=0.02)
        np.testing.assert_array_equal(p, [1.0, -2.0])
        assert (state.m[0] == 0).all() and (state.v[0] == 0).all()

    def test_first_step_magnitude(self):
        # t=1: m_hat = g, v_hat = g^2 -> step = lr * g/(|g| + eps)
        p = np.array([0.0])
        state = AdamState.for_params([p])
        adam_step([p], [np.array([1.0])], state, lr=0.02)
        assert p[0] == pytest.approx(-0.02 * 1.0 / (1.0 + 1e-8), rel=1e-12)

    def test_two_steps_match_scalar_reference(self):
        p = np.array([0.5])
        g = np.array([0.3])
        state = AdamState.for_params([p])
        adam_step([p], [g], state, lr=0.01)
        adam_step([p], [g], state, lr=0.01)

        # independent scalar recurrence
        ref, m, v = 0.5, 0.0, 0.0
        for t in (1, 2):
            m = 0.9 * m + 0.1 * 0.3
            v = 0.999 * v + 0.001 * 0.3**2
            ref -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert p[0] == pytest.approx(ref, rel=1e-12)

    def test_shape_mismatch_rejected(self):
        p = np.zeros(3)
        state = AdamState.for_params([p])
        with pytest.raises(ValueError):
            adam_step([p], [np.zeros(2)], state, lr=0.1)

    def test_bad_lr_rejected(self):
        p = np.zeros(1)
        state = AdamState.for_params([p])
        with pytest.raises(ValueError):
            adam_step([p], [np.zeros(1)], state, lr=0.0)


class TestTypes:
    def test_grid_requires_positive_dims(self):
        with pytest.raises(ValueError):
            Grid2D(0, 2, 1)

    def test_grid_shape_consistency(self):
        with pytest.raises(ValueError):
            Grid2D(2, 2, 3, ad.Var(np.zeros((2, 2, 1))))

    def test_linear_map_apply(self):
        lm = LinearMap.random(3, 2, np.random.default_rng(0), dtype=np.float64)
        x = ad.Var(np.ones((4, 3)))
        out = lm.apply(x)
        expect = np.ones((4, 3)) @ lm.weights.data.T + lm.bias.data
        np.testing.assert_allclose(out.data, expect)

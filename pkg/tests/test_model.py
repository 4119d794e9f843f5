"""Model forward passes against independent loop-based oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sola.errors import ConfigError, ShapeError
from sola.model import (
    ModelConfig,
    SolaParams,
    conv1d_same,
    init_params,
    proj_forward,
    sola_forward,
)


def conv1d_same_oracle(x, weight, bias):
    """Naive triple-loop conv with zero padding; the reference the fast path must match."""
    k, c_in, c_out = weight.shape
    w_len = x.shape[0]
    r = (k - 1) // 2
    y = np.zeros((w_len, c_out))
    for t in range(w_len):
        for o in range(c_out):
            acc = bias[o]
            for j in range(-r, r + 1):
                if 0 <= t + j < w_len:
                    for i in range(c_in):
                        acc += x[t + j, i] * weight[j + r, i, o]
            y[t, o] = acc
    return y


def sola_forward_oracle(params, window):
    """Straightforward re-composition of the stack from the oracle conv."""
    h = np.maximum(conv1d_same_oracle(window, params.conv1_w, params.conv1_b), 0.0)
    z = conv1d_same_oracle(h, params.conv2_w, params.conv2_b)
    return z + window if params.residual_enabled else z


class TestInitParams:
    def test_deterministic(self):
        cfg = ModelConfig(dim_m=6, kernel_k=3)
        a = init_params(cfg, 42)
        b = init_params(cfg, 42)
        for name, arr in a.tensors().items():
            assert arr.tobytes() == getattr(b, name).tobytes()

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(dim_m=4, kernel_k=4)

    def test_kernel_nine_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(dim_m=4, kernel_k=9)

    def test_hidden_defaults_to_dim(self):
        assert ModelConfig(dim_m=12).hidden_h == 12

    def test_biases_zero_and_weights_bounded(self):
        cfg = ModelConfig(dim_m=16, hidden_h=8, kernel_k=5)
        p = init_params(cfg, 0)
        assert not p.conv1_b.any() and not p.conv2_b.any()
        assert not p.proj1_b.any() and not p.proj2_b.any()
        assert np.abs(p.conv1_w).max() <= np.sqrt(6 / (5 * 16))
        assert np.abs(p.conv2_w).max() <= np.sqrt(6 / (5 * 8))
        assert np.abs(p.proj1_w).max() <= np.sqrt(6 / 16)

    def test_empirical_weight_mean_near_zero(self):
        # oracle: mean of n uniform(-a, a) draws has sd a/sqrt(3n)
        cfg = ModelConfig(dim_m=32, hidden_h=32, kernel_k=5)
        chunks = [init_params(cfg, seed).conv1_w.ravel() for seed in range(200)]
        values = np.concatenate(chunks)
        assert values.size >= 1_000_000
        bound = np.sqrt(6 / (5 * 32))
        three_sigma = 3 * bound / np.sqrt(3 * values.size)
        assert abs(values.mean()) < three_sigma


class TestConv1dSame:
    def test_pointwise_identity(self):
        x = np.random.default_rng(0).standard_normal((6, 3))
        weight = np.eye(3)[None, :, :]
        y = conv1d_same(x, weight, np.zeros(3))
        assert np.allclose(y, x)

    def test_all_ones_boundary_arithmetic(self):
        x = np.ones((5, 1))
        weight = np.ones((3, 1, 1))
        y = conv1d_same(x, weight, np.zeros(1))
        assert np.allclose(y.ravel(), [2, 3, 3, 3, 2])

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), k=st.sampled_from([1, 3, 5, 7]),
           w_len=st.integers(1, 12), c_in=st.integers(1, 4), c_out=st.integers(1, 4))
    def test_matches_triple_loop_oracle(self, seed, k, w_len, c_in, c_out):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((w_len, c_in))
        weight = rng.standard_normal((k, c_in, c_out))
        bias = rng.standard_normal(c_out)
        fast = conv1d_same(x, weight, bias)
        slow = conv1d_same_oracle(x, weight, bias)
        assert np.max(np.abs(fast - slow)) < 1e-6

    def test_even_kernel_and_shape_mismatch(self):
        x = np.zeros((4, 2))
        with pytest.raises(ShapeError):
            conv1d_same(x, np.zeros((2, 2, 2)), np.zeros(2))
        with pytest.raises(ShapeError):
            conv1d_same(x, np.zeros((3, 3, 2)), np.zeros(2))


class TestSolaForward:
    @pytest.mark.parametrize("k", [1, 3, 5, 7])
    def test_output_shape_equals_input_shape(self, k):
        params = init_params(ModelConfig(dim_m=6, hidden_h=4, kernel_k=k), 1)
        window = np.random.default_rng(1).standard_normal((11, 6))
        assert sola_forward(params, window).shape == window.shape

    def test_residual_identity_with_zeroed_second_conv(self):
        params = init_params(ModelConfig(dim_m=5, kernel_k=3), 2)
        params.conv2_w[:] = 0.0
        params.conv2_b[:] = 0.0
        window = np.random.default_rng(2).standard_normal((9, 5))
        assert np.array_equal(sola_forward(params, window), window)

    def test_matches_independent_oracle(self):
        rng = np.random.default_rng(7)
        params = init_params(ModelConfig(dim_m=4, hidden_h=3, kernel_k=5), 7)
        window = rng.standard_normal((10, 4))
        assert np.max(np.abs(sola_forward(params, window) - sola_forward_oracle(params, window))) < 1e-6

    def test_interior_shift_equivariance(self):
        rng = np.random.default_rng(9)
        for k in (1, 3, 5, 7):
            params = init_params(ModelConfig(dim_m=4, kernel_k=k), k)
            seq = rng.standard_normal((30, 4))
            w_len = 20
            out0 = sola_forward(params, seq[0:w_len])
            out1 = sola_forward(params, seq[1:1 + w_len])
            # positions at distance >= k-1 from both window boundaries
            for i in range(max(k - 1, 1), w_len - k):
                assert np.max(np.abs(out0[i + 1] - out1[i])) < 1e-5

    def test_finite_in_finite_out(self):
        params = init_params(ModelConfig(dim_m=3, kernel_k=3), 0)
        window = np.random.default_rng(0).standard_normal((50, 3)) * 1e3
        assert np.all(np.isfinite(sola_forward(params, window)))

    def test_dim_mismatch(self):
        params = init_params(ModelConfig(dim_m=3, kernel_k=3), 0)
        with pytest.raises(ShapeError):
            sola_forward(params, np.zeros((4, 5)))


class TestProjForward:
    def test_identity_weights_transparent_on_nonnegative_input(self):
        params = init_params(ModelConfig(dim_m=4, kernel_k=1), 0)
        params.proj1_w = np.eye(4)
        params.proj2_w = np.eye(4)
        params.proj1_b[:] = 0.0
        params.proj2_b[:] = 0.0
        z = np.abs(np.random.default_rng(1).standard_normal((6, 4)))
        assert np.allclose(proj_forward(params, z), z)

    def test_zero_input_gives_bias_path(self):
        params = init_params(ModelConfig(dim_m=3, kernel_k=1), 3)
        params.proj1_b = np.array([0.5, 0.0, 2.0])
        params.proj2_b = np.array([-1.0, 1.0, 0.0])
        z = np.zeros((4, 3))
        expected = np.maximum(params.proj1_b, 0.0) @ params.proj2_w + params.proj2_b
        out = proj_forward(params, z)
        assert np.allclose(out, np.tile(expected, (4, 1)))

    def test_matches_matrix_oracle(self):
        rng = np.random.default_rng(5)
        params = init_params(ModelConfig(dim_m=6, kernel_k=1), 5)
        z = rng.standard_normal((8, 6))
        expected = np.empty_like(z)
        for row in range(8):
            hidden = np.maximum(z[row] @ params.proj1_w + params.proj1_b, 0.0)
            expected[row] = hidden @ params.proj2_w + params.proj2_b
        assert np.max(np.abs(proj_forward(params, z) - expected)) < 1e-6

    def test_dim_mismatch(self):
        params = init_params(ModelConfig(dim_m=3, kernel_k=1), 0)
        with pytest.raises(ShapeError):
            proj_forward(params, np.zeros((2, 4)))


class TestSolaParams:
    def test_copy_is_deep(self):
        params = init_params(ModelConfig(dim_m=3, kernel_k=3), 0)
        clone = params.copy()
        clone.conv1_w[0, 0, 0] += 1.0
        assert params.conv1_w[0, 0, 0] != clone.conv1_w[0, 0, 0]

    def test_shape_validation(self):
        params = init_params(ModelConfig(dim_m=3, kernel_k=3), 0)
        bad = params.tensors()
        bad["conv2_b"] = np.zeros(4)
        with pytest.raises(ShapeError):
            SolaParams(**bad)

    def test_config_roundtrip(self):
        cfg = ModelConfig(dim_m=5, hidden_h=7, kernel_k=3, residual_enabled=False)
        assert init_params(cfg, 0).config() == cfg

"""Similarity-matching objective: targets, gathering, predictions, loss."""

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sola.errors import ConfigError, DomainError, ShapeError
from sola.model import ModelConfig, init_params
from sola.similarity import (
    MatchConfig,
    Tsm,
    build_target_tsm,
    gather,
    matching_loss,
    off_diagonal_distance,
    predicted_tsm,
    rescaled_cosine,
    target_similarity,
    tsm_entropy,
)

mpmath.mp.dps = 40


def sigmoid_oracle(x) -> float:
    """High-precision sigmoid for frozen expected values."""
    return float(1 / (1 + mpmath.e ** (-mpmath.mpf(x))))


def bce_oracle(lam, p) -> float:
    """High-precision soft-target binary cross entropy of one position."""
    lam, p = mpmath.mpf(lam), mpmath.mpf(p)
    return float(-lam * mpmath.log(p) - (1 - lam) * mpmath.log(1 - p))


class TestTargetSimilarity:
    def test_reference_values(self):
        # sigma(16/4^2) = sigma(1), sigma(16/2^2) = sigma(4)
        assert target_similarity(4.0, 16.0) == pytest.approx(sigmoid_oracle(1), abs=1e-12)
        assert target_similarity(2.0, 16.0) == pytest.approx(sigmoid_oracle(4), abs=1e-12)
        assert sigmoid_oracle(1) == pytest.approx(0.7310585786, abs=1e-9)
        assert sigmoid_oracle(4) == pytest.approx(0.9820137900, abs=1e-9)

    def test_limit_is_one_half(self):
        assert target_similarity(1e6, 16.0) > 0.5
        assert target_similarity(1e6, 16.0) < 0.5 + 1e-9

    def test_strictly_decreasing(self):
        values = target_similarity(np.arange(1, 1001, dtype=float), 16.0)
        assert np.all(np.diff(values) < 0)
        assert np.all(values > 0.5) and np.all(values < 1.0)

    def test_zero_interval_rejected(self):
        with pytest.raises(DomainError):
            target_similarity(0.0, 16.0)
        with pytest.raises(DomainError):
            target_similarity(np.array([1.0, 0.0]), 16.0)

    def test_nonpositive_k_rejected(self):
        with pytest.raises(DomainError):
            target_similarity(1.0, 0.0)


class TestGather:
    def test_step_one_is_identity(self):
        z = np.random.default_rng(0).standard_normal((7, 3))
        assert np.array_equal(gather(z, 1), z)

    def test_small_case_mean(self):
        z = np.arange(16, dtype=float).reshape(8, 2)
        out = gather(z, 2)
        assert out.shape == (4, 2)
        assert np.array_equal(out[0], (z[0] + z[1]) / 2)

    def test_remainder_rows_dropped(self):
        z = np.arange(14, dtype=float).reshape(7, 2)
        assert gather(z, 2).shape == (3, 2)
        assert gather(z, 2, mode="stride").shape == (3, 2)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 1000), w_len=st.integers(1, 20), step=st.integers(1, 6))
    def test_matches_brute_force_means(self, seed, w_len, step):
        z = np.random.default_rng(seed).standard_normal((w_len, 3))
        if w_len < step:
            with pytest.raises(ShapeError):
                gather(z, step)
            return
        out = gather(z, step)
        n = w_len // step
        assert out.shape == (n, 3)
        for g in range(n):
            block = z[g * step:(g + 1) * step]
            assert np.max(np.abs(out[g] - block.mean(axis=0))) < 1e-7

    def test_stride_mode_picks_rows(self):
        z = np.arange(12, dtype=float).reshape(6, 2)
        assert np.array_equal(gather(z, 2, mode="stride"), z[[0, 2, 4]])

    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            gather(np.zeros((4, 2)), 2, mode="max")


class TestRescaledCosine:
    def test_parallel(self):
        u = np.array([1.0, 2.0, 3.0])
        assert rescaled_cosine(u, u) == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal(self):
        assert rescaled_cosine(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == pytest.approx(0.5, abs=1e-12)

    def test_antiparallel(self):
        u = np.array([0.3, -0.4])
        assert rescaled_cosine(u, -u) == pytest.approx(0.0, abs=1e-6)

    def test_zero_vector_is_neutral(self):
        assert rescaled_cosine(np.zeros(3), np.ones(3)) == pytest.approx(0.5, abs=1e-8)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_always_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        u, v = rng.standard_normal(5), rng.standard_normal(5)
        assert 0.0 <= rescaled_cosine(u, v) <= 1.0


class TestBuildTargetTsm:
    def test_three_position_values(self):
        tsm = build_target_tsm(3, MatchConfig(K=16.0, step_s=2))
        # gathered neighbours are 2 snippets apart -> sigma(4); distance 2 -> sigma(1)
        assert tsm.values[0, 1] == pytest.approx(0.9820137900, abs=1e-9)
        assert tsm.values[0, 2] == pytest.approx(0.7310585786, abs=1e-9)
        assert not tsm.diagonal_defined
        assert np.all(np.isnan(np.diag(tsm.values)))

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(2, 20), step=st.integers(1, 5),
           k_const=st.floats(0.5, 30, allow_nan=False))
    def test_symmetric_and_decreasing(self, n, step, k_const):
        # K capped at 30: float64 sigmoid saturates to exactly 1.0 near K/d^2 ~ 36.7,
        # which would collapse the strict inequalities at d = step
        tsm = build_target_tsm(n, MatchConfig(K=k_const, step_s=step))
        off = ~np.eye(n, dtype=bool)
        assert np.array_equal(tsm.values[off], tsm.values.T[off])
        for i in range(n):
            row = tsm.values[i]
            right = row[i + 1:]
            assert np.all(np.diff(right) < 0) or right.size < 2
        assert np.all(tsm.values[off] > 0.5) and np.all(tsm.values[off] < 1.0)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            build_target_tsm(1, MatchConfig())


class TestPredictedTsm:
    def test_identity_projector_orthonormal_rows(self):
        params = init_params(ModelConfig(dim_m=4, kernel_k=1), 0)
        params.proj1_w = np.eye(4)
        params.proj2_w = np.eye(4)
        params.proj1_b[:] = 0.0
        params.proj2_b[:] = 0.0
        z = np.eye(4)  # unit-norm, mutually orthogonal, nonnegative rows
        tsm = predicted_tsm(z, params)
        off = ~np.eye(4, dtype=bool)
        assert np.allclose(tsm.values[off], 0.5, atol=1e-6)
        assert np.all(np.isnan(np.diag(tsm.values)))

    def test_entries_match_definition(self):
        from sola.model import proj_forward
        rng = np.random.default_rng(3)
        params = init_params(ModelConfig(dim_m=5, kernel_k=1), 3)
        z = rng.standard_normal((4, 5))
        tsm = predicted_tsm(z, params)
        projected = proj_forward(params, z)
        for i in range(4):
            for j in range(4):
                if i != j:
                    assert tsm.values[i, j] == pytest.approx(
                        rescaled_cosine(z[i], projected[j]), abs=1e-12)

    def test_generic_asymmetry(self):
        rng = np.random.default_rng(8)
        params = init_params(ModelConfig(dim_m=6, kernel_k=1), 8)
        tsm = predicted_tsm(rng.standard_normal((5, 6)), params)
        off = ~np.eye(5, dtype=bool)
        assert np.max(np.abs(tsm.values[off] - tsm.values.T[off])) > 1e-6


class TestMatchingLoss:
    def test_uniform_half_gives_ln_two(self):
        n = 6
        vals = np.full((n, n), 0.5)
        np.fill_diagonal(vals, np.nan)
        t = Tsm(vals, diagonal_defined=False)
        assert matching_loss(t, t) == pytest.approx(np.log(2), abs=1e-12)

    def test_perfect_prediction_hits_entropy_floor(self):
        target = build_target_tsm(8, MatchConfig(K=16.0, step_s=2))
        assert matching_loss(target, target) == pytest.approx(tsm_entropy(target), abs=1e-10)

    def test_single_pair_value(self):
        # frozen from the high-precision BCE oracle
        lam, p = 0.7310586, 0.9
        expected = bce_oracle(lam, p)
        assert expected == pytest.approx(0.6962851696, abs=1e-9)
        vals_t = np.array([[np.nan, lam], [lam, np.nan]])
        vals_p = np.array([[np.nan, p], [p, np.nan]])
        loss = matching_loss(Tsm(vals_t, diagonal_defined=False),
                             Tsm(vals_p, diagonal_defined=False))
        assert loss == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(2, 10))
    def test_gibbs_inequality(self, seed, n):
        rng = np.random.default_rng(seed)
        t_vals = rng.uniform(0.501, 0.999, (n, n))
        p_vals = rng.uniform(0.001, 0.999, (n, n))
        np.fill_diagonal(t_vals, np.nan)
        np.fill_diagonal(p_vals, np.nan)
        target = Tsm(t_vals, diagonal_defined=False)
        pred = Tsm(p_vals, diagonal_defined=False)
        assert matching_loss(target, pred) >= tsm_entropy(target) - 1e-12

    def test_shape_mismatch(self):
        a = build_target_tsm(4, MatchConfig())
        b = build_target_tsm(5, MatchConfig())
        with pytest.raises(ShapeError):
            matching_loss(a, b)

    def test_extreme_predictions_survive_clamp(self):
        n = 3
        t_vals = np.full((n, n), 0.9)
        p_vals = np.zeros((n, n))  # cosine exactly -1 everywhere
        np.fill_diagonal(t_vals, np.nan)
        np.fill_diagonal(p_vals, np.nan)
        loss = matching_loss(Tsm(t_vals, diagonal_defined=False),
                             Tsm(p_vals, diagonal_defined=False))
        assert np.isfinite(loss) and loss > 0


class TestTsmType:
    def test_out_of_range_rejected(self):
        from sola.errors import DataError
        with pytest.raises(DataError):
            Tsm(np.array([[1.0, 1.5], [0.2, 1.0]]))

    def test_nan_off_diagonal_rejected(self):
        from sola.errors import DataError
        with pytest.raises(DataError):
            Tsm(np.array([[1.0, np.nan], [0.5, 1.0]]))

    def test_off_diagonal_distance(self):
        a = Tsm(np.array([[1.0, 0.6], [0.2, 1.0]]))
        b = Tsm(np.array([[0.0, 0.6], [0.7, 0.0]]))
        # diagonals excluded: only the (1,0) entries differ
        assert off_diagonal_distance(a, b) == pytest.approx(0.5)

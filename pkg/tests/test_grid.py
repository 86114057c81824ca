"""Core state ops: RMSE, normalization round trips, straight-line paths."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmda.grid import (
    GridShapeError,
    GridState,
    VariableStats,
    denormalize,
    lerp_states,
    normalize,
    rmse_per_variable,
)


def state(values, names=None):
    values = np.asarray(values, dtype=np.float64)
    if names is None:
        names = tuple(f"v{i}" for i in range(values.shape[2]))
    return GridState(values, names)


def random_state(shape, seed=0, names=None):
    rng = np.random.default_rng(seed)
    return state(rng.standard_normal(shape), names)


class TestGridState:
    def test_immutability(self):
        s = random_state((2, 3, 1))
        with pytest.raises(ValueError):
            s.values[0, 0, 0] = 1.0

    def test_rejects_nan(self):
        bad = np.zeros((1, 4, 1))
        bad[0, 1, 0] = np.nan
        with pytest.raises(ValueError):
            state(bad)

    @pytest.mark.parametrize("shape", [(0, 4, 1), (1, 1, 1), (1, 4, 0)])
    def test_rejects_degenerate_dims(self, shape):
        with pytest.raises(GridShapeError):
            GridState(np.zeros(shape), ("x",) * shape[2])

    def test_name_count_must_match(self):
        with pytest.raises(GridShapeError):
            GridState(np.zeros((1, 4, 2)), ("x",))


class TestRmse:
    def test_identity_is_zero(self):
        s = random_state((3, 5, 2))
        np.testing.assert_array_equal(rmse_per_variable(s, s), [0.0, 0.0])

    def test_constant_offset(self):
        a = state(np.ones((4, 7, 3)))
        b = state(np.zeros((4, 7, 3)))
        np.testing.assert_array_equal(rmse_per_variable(a, b), [1.0, 1.0, 1.0])

    def test_matches_scalar_loop_oracle(self):
        a = random_state((4, 4, 2), seed=1)
        b = random_state((4, 4, 2), seed=2)
        expected = np.zeros(2)
        for v in range(2):
            acc = 0.0
            for i in range(4):
                for j in range(4):
                    acc += (a.values[i, j, v] - b.values[i, j, v]) ** 2
            expected[v] = (acc / 16.0) ** 0.5
        np.testing.assert_allclose(rmse_per_variable(a, b), expected, rtol=1e-13)

    def test_shape_error_names_dimension(self):
        a = random_state((2, 4, 1))
        b = random_state((2, 5, 1))
        with pytest.raises(GridShapeError, match="W mismatch"):
            rmse_per_variable(a, b)
        c = random_state((3, 4, 1))
        with pytest.raises(GridShapeError, match="H mismatch"):
            rmse_per_variable(a, c)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_symmetry_and_positivity(self, seed):
        a = random_state((2, 4, 2), seed=seed)
        b = random_state((2, 4, 2), seed=seed + 1)
        fwd = rmse_per_variable(a, b)
        np.testing.assert_array_equal(fwd, rmse_per_variable(b, a))
        assert (fwd > 0).all()


class TestNormalize:
    def test_mean_field_maps_to_zero(self):
        stats = VariableStats((2.5,), (1.7,))
        s = state(np.full((2, 4, 1), 2.5))
        np.testing.assert_array_equal(normalize(s, stats).values, 0.0)

    def test_known_value(self):
        stats = VariableStats((0.0,), (2.0,))
        s = state(np.full((1, 4, 1), 4.0))
        np.testing.assert_array_equal(normalize(s, stats).values, 2.0)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        stats = VariableStats(
            tuple(rng.normal(size=2)), tuple(np.abs(rng.normal(size=2)) + 0.1)
        )
        s = random_state((3, 4, 2), seed=seed)
        back = denormalize(normalize(s, stats), stats)
        np.testing.assert_allclose(back.values, s.values, rtol=1e-12, atol=1e-12)

    def test_nonpositive_std_rejected(self):
        with pytest.raises(ValueError):
            VariableStats((0.0,), (0.0,))
        with pytest.raises(ValueError):
            VariableStats((0.0, 1.0), (1.0, -2.0))

    def test_stats_length_mismatch(self):
        with pytest.raises(ValueError):
            VariableStats((0.0,), (1.0, 2.0))


class TestLerp:
    def test_endpoints(self):
        a = random_state((2, 4, 1), seed=3)
        b = random_state((2, 4, 1), seed=4)
        np.testing.assert_array_equal(lerp_states(a, b, 0.0).values, a.values)
        np.testing.assert_array_equal(lerp_states(a, b, 1.0).values, b.values)

    def test_midpoint(self):
        a = state(np.zeros((1, 4, 1)))
        b = state(np.full((1, 4, 1), 2.0))
        np.testing.assert_array_equal(lerp_states(a, b, 0.5).values, 1.0)

    @pytest.mark.parametrize("tau", [-0.01, 1.01, 2.0])
    def test_tau_out_of_range(self, tau):
        a = random_state((1, 4, 1))
        with pytest.raises(ValueError):
            lerp_states(a, a, tau)

    @given(st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_affine_property(self, tau, seed):
        a = random_state((2, 4, 1), seed=seed)
        b = random_state((2, 4, 1), seed=seed + 9)
        lhs = lerp_states(a, b, tau).values - a.values
        rhs = tau * (b.values - a.values)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

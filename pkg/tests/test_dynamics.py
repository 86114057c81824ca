"""Toy dynamics: stencils, RK4 order, dataset statistics, backgrounds."""

import numpy as np
import pytest

from fmda.dynamics import (
    VARIABLE_NAMES,
    DynamicsConfig,
    IntegrationBlowupError,
    generate_dataset,
    make_background,
    rk4_step,
    rollout,
    tendency,
)
from fmda.grid import GridState, rmse_per_variable

RING5 = DynamicsConfig(W=5, dt=0.01, substeps=5)


def ring_state(values):
    return GridState(np.asarray(values, dtype=np.float64).reshape(1, -1, 1), VARIABLE_NAMES)


class TestTendency:
    def test_equilibrium_ring(self):
        cfg = DynamicsConfig(W=12, F=8.0)
        x = ring_state(np.full(12, 8.0))
        np.testing.assert_array_equal(tendency(x, cfg).values, 0.0)

    def test_zero_state_zero_forcing(self):
        cfg = DynamicsConfig(W=6, F=0.0)
        x = ring_state(np.zeros(6))
        np.testing.assert_array_equal(tendency(x, cfg).values, 0.0)

    def test_hand_computed_stencil(self):
        # dX_j = (X_{j+1} - X_{j-2}) X_{j-1} - X_j + F on X = (1..5), F = 8,
        # evaluated index by index with pencil and paper.
        x = ring_state([1.0, 2.0, 3.0, 4.0, 5.0])
        out = tendency(x, RING5).values[0, :, 0]
        np.testing.assert_array_equal(out, [-3.0, 4.0, 11.0, 13.0, -5.0])

    def test_equilibrium_torus(self):
        cfg = DynamicsConfig(system="torus", H=4, W=6, F=8.0, c=0.5)
        x = GridState(np.full((4, 6, 1), 8.0), VARIABLE_NAMES)
        np.testing.assert_array_equal(tendency(x, cfg).values, 0.0)

    def test_torus_adds_row_coupling(self):
        cfg_t = DynamicsConfig(system="torus", H=4, W=6, F=8.0, c=0.7)
        rng = np.random.default_rng(0)
        x = GridState(rng.standard_normal((4, 6, 1)), VARIABLE_NAMES)
        rows_only = tendency(x, DynamicsConfig(system="torus", H=4, W=6, F=8.0, c=0.0))
        f = x.values[:, :, 0]
        laplacian = np.roll(f, -1, 0) + np.roll(f, 1, 0) - 2 * f
        np.testing.assert_allclose(
            tendency(x, cfg_t).values[:, :, 0],
            rows_only.values[:, :, 0] + 0.7 * laplacian,
            rtol=1e-13,
        )

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            tendency(ring_state(np.zeros(6)), RING5)


def _rk4_reference(x: GridState, cfg: DynamicsConfig, refine: int) -> np.ndarray:
    """Independent refined-step reference: `refine` RK4 steps of dt/refine."""
    fine = DynamicsConfig(
        system=cfg.system, H=cfg.H, W=cfg.W, F=cfg.F, c=cfg.c,
        dt=cfg.dt / refine, substeps=1,
    )
    out = x
    for _ in range(refine):
        out = rk4_step(out, fine)
    return out.values


class TestRk4:
    def test_equilibrium_preserved(self):
        cfg = DynamicsConfig(W=8, F=8.0)
        x = ring_state(np.full(8, 8.0))
        out = rollout(x, 20, cfg).states[-1]
        np.testing.assert_array_equal(out.values, x.values)

    def test_one_step_matches_refined_oracle(self):
        cfg = DynamicsConfig(W=5, dt=0.005)
        x = ring_state([1.0, 2.0, 3.0, 4.0, 5.0])
        ref32 = _rk4_reference(x, cfg, 32)
        ref64 = _rk4_reference(x, cfg, 64)
        # Richardson sanity: the reference itself has converged
        assert np.abs(ref32 - ref64).max() < 1e-12
        step = rk4_step(x, cfg).values
        assert np.abs(step - ref64).max() < 1e-8

    def test_order_of_convergence(self):
        cfg = DynamicsConfig(W=5, dt=0.05)
        half = DynamicsConfig(W=5, dt=0.025)
        x = ring_state([1.0, 2.0, 3.0, 4.0, 5.0])
        ref = _rk4_reference(x, cfg, 256)
        err_full = np.abs(rk4_step(x, cfg).values - ref).max()
        two = rk4_step(rk4_step(x, half), half).values
        err_half = np.abs(two - ref).max()
        assert err_full / err_half >= 8.0

    def test_rollout_zero_intervals(self):
        x = ring_state([1.0, 2.0, 3.0, 4.0, 5.0])
        traj = rollout(x, 0, RING5)
        assert len(traj) == 1
        np.testing.assert_array_equal(traj[0].values, x.values)

    def test_blowup_reports_step_index(self):
        cfg = DynamicsConfig(W=5, dt=10.0, substeps=4)
        x = ring_state([1.0, 5.0, -3.0, 8.0, 2.0])
        with np.errstate(all="ignore"), pytest.raises(IntegrationBlowupError) as exc:
            rollout(x, 50, cfg)
        assert exc.value.step >= 1


class TestGenerateDataset:
    def test_deterministic(self):
        cfg = DynamicsConfig(W=12)
        a = generate_dataset(cfg, 20, 15, seed=42)
        b = generate_dataset(cfg, 20, 15, seed=42)
        for sa, sb in zip(a.states, b.states):
            np.testing.assert_array_equal(sa.values, sb.values)

    def test_exact_length(self):
        traj = generate_dataset(DynamicsConfig(W=12), 5, 10, seed=0)
        assert len(traj) == 10

    def test_length_floor(self):
        with pytest.raises(ValueError):
            generate_dataset(DynamicsConfig(W=12), 5, 9, seed=0)

    @pytest.mark.slow
    def test_climatological_variance_band(self):
        # standard configuration: per-gridpoint long-run variance sits in [10, 20]
        cfg = DynamicsConfig(W=40, F=8.0, dt=0.01, substeps=5)
        traj = generate_dataset(cfg, 500, 2000, seed=7)
        stacked = np.stack([s.values[0, :, 0] for s in traj.states])
        per_point = stacked.var(axis=0)
        assert per_point.min() > 10.0
        assert per_point.max() < 20.0


class TestMakeBackground:
    @pytest.fixture(scope="class")
    def traj(self):
        return generate_dataset(DynamicsConfig(W=12), 50, 40, seed=3)

    def test_perfect_model_exact_ic(self, traj):
        bg = make_background(traj, 10, lead=8, sigma_ic=0.0)
        np.testing.assert_allclose(bg.values, traj[10].values, atol=1e-9)

    def test_zero_lead_returns_truth(self, traj):
        bg = make_background(traj, 5, lead=0, sigma_ic=0.0)
        np.testing.assert_array_equal(bg.values, traj[5].values)

    def test_index_errors(self, traj):
        with pytest.raises(IndexError):
            make_background(traj, 3, lead=8)
        with pytest.raises(IndexError):
            make_background(traj, len(traj), lead=0)

    @pytest.mark.slow
    def test_chaotic_error_growth(self):
        cfg = DynamicsConfig(W=40)
        traj = generate_dataset(cfg, 500, 80, seed=11)
        means = {}
        for lead in (1, 4, 8):
            errs = []
            for i, t in enumerate(range(8, 8 + 60)):
                bg = make_background(traj, t, lead, sigma_ic=0.05, seed=1000 + i)
                errs.append(rmse_per_variable(bg, traj[t])[0])
            means[lead] = np.mean(errs)
        assert 0.0 < means[1] <= means[4] <= means[8]

    def test_forecast_forcing_bias_degrades(self, traj):
        import dataclasses

        biased = dataclasses.replace(traj, config=dataclasses.replace(traj.config, forecast_forcing_bias=1.0))
        exact = make_background(traj, 12, lead=4, sigma_ic=0.0)
        off = make_background(biased, 12, lead=4, sigma_ic=0.0)
        assert rmse_per_variable(off, traj[12])[0] > rmse_per_variable(exact, traj[12])[0]


class TestConfigValidation:
    def test_ring_requires_h1(self):
        with pytest.raises(ValueError):
            DynamicsConfig(system="ring", H=2, W=8)

    def test_ring_needs_four_points(self):
        with pytest.raises(ValueError):
            DynamicsConfig(W=3)

    def test_torus_min_dims(self):
        with pytest.raises(ValueError):
            DynamicsConfig(system="torus", H=2, W=8)
        DynamicsConfig(system="torus", H=3, W=4)  # smallest valid

    def test_positive_dt_substeps(self):
        with pytest.raises(ValueError):
            DynamicsConfig(dt=0.0)
        with pytest.raises(ValueError):
            DynamicsConfig(substeps=0)

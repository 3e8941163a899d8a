"""Trajectory engine tests: basis construction, boundary solve, decode, encode."""

import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from motiongen import prodmp
from motiongen.errors import ConfigurationError, ContractError, NumericalError, RangeError


@pytest.fixture(scope="module")
def cfg():
    return prodmp.ProDMPConfig(dof=2, n_basis=3, alpha=25.0, duration=1.2, grid_dt=1e-3)


@pytest.fixture(scope="module")
def table(cfg):
    return prodmp.precompute_basis(cfg)


def reference_forcing(cfg, t, col):
    """Forcing for one column, written independently of the module internals."""
    x_end = math.exp(-cfg.alpha_phase)
    if cfg.n_basis > 1:
        centers = np.linspace(x_end, 1.0, cfg.n_basis)
        spacing = centers[1] - centers[0]
    else:
        centers = np.array([0.5 * (x_end + 1.0)])
        spacing = 1.0 - x_end
    width = spacing / math.sqrt(8.0 * math.log(1.0 / 0.55))
    lam = cfg.alpha / (2.0 * cfg.duration)
    if col == cfg.n_basis:
        return lam * lam
    x = math.exp(-cfg.alpha_phase * t / cfg.duration)
    psi = np.exp(-0.5 * ((x - centers) / width) ** 2)
    return x * psi[col] / psi.sum()


def random_weights(rng, cfg, scale=None):
    if scale is None:
        scale = np.concatenate([np.full(cfg.n_basis, 300.0), [1.0]])
    return rng.normal(0.0, 1.0, cfg.n_weights) * np.tile(scale, cfg.dof)


class TestConfig:
    def test_rejects_nonpositive_gains(self):
        with pytest.raises(ConfigurationError):
            prodmp.ProDMPConfig(dof=1, alpha=0.0)
        with pytest.raises(ConfigurationError):
            prodmp.ProDMPConfig(dof=1, alpha_phase=-1.0)
        with pytest.raises(ConfigurationError):
            prodmp.ProDMPConfig(dof=0)

    def test_rejects_coarse_grid(self):
        with pytest.raises(ConfigurationError):
            prodmp.ProDMPConfig(dof=1, duration=1.0, grid_dt=0.05)

    def test_lam(self, cfg):
        assert cfg.lam == pytest.approx(25.0 / 2.4)


class TestBasisTable:
    def test_phi_starts_at_rest(self, table):
        assert np.all(table.phi[0] == 0.0)
        assert np.all(table.phi_dot[0] == 0.0)

    def test_complementary_function_normalization(self, table, cfg):
        assert table.y1[0] == 1.0
        assert table.y2[0] == 0.0
        assert table.y1_dot[0] == pytest.approx(-cfg.lam)
        assert table.y2_dot[0] == 1.0

    def test_goal_column_unit_steady_state(self, table):
        assert abs(table.phi[-1, -1] - 1.0) < 1e-3

    def test_all_entries_finite(self, table):
        for arr in (table.phi, table.phi_dot, table.y1, table.y2, table.y1_dot, table.y2_dot):
            assert np.all(np.isfinite(arr))

    def test_columns_match_adaptive_integration(self, cfg, table):
        # Oracle: adaptive Runge-Kutta on the same forced attractor.
        lam = cfg.lam
        for col in range(cfg.n_columns):
            def rhs(t, y, col=col):
                u = reference_forcing(cfg, t, col)
                return [y[1], u - 2.0 * lam * y[1] - lam * lam * y[0]]

            sol = solve_ivp(
                rhs,
                (0.0, cfg.duration),
                [0.0, 0.0],
                t_eval=table.times,
                rtol=1e-11,
                atol=1e-13,
                method="DOP853",
            )
            assert np.max(np.abs(sol.y[0] - table.phi[:, col])) <= 1e-6
            assert np.max(np.abs(sol.y[1] - table.phi_dot[:, col])) <= 1e-6


class TestBoundarySolve:
    def test_zero_everything_gives_zero_coefficients(self, table, cfg):
        s0 = prodmp.BoundaryState(np.zeros(2), np.zeros(2), 0.0)
        c = prodmp.solve_boundary_coefficients(table, np.zeros(cfg.n_weights), s0)
        assert np.all(c == 0.0)

    def test_unit_position_boundary(self, table, cfg):
        # Solved by hand from y1(0)=1, y2(0)=0, dy1(0)=-lam, dy2(0)=1:
        # c1 = 1 and c2 = lam.
        s0 = prodmp.BoundaryState(np.array([1.0, 1.0]), np.zeros(2), 0.0)
        c = prodmp.solve_boundary_coefficients(table, np.zeros(cfg.n_weights), s0)
        assert c[:, 0] == pytest.approx(1.0)
        assert c[:, 1] == pytest.approx(cfg.lam)

    def test_reconstruction_matches_boundary(self, table, cfg):
        rng = np.random.default_rng(3)
        for _ in range(20):
            w = random_weights(rng, cfg)
            t_b = float(rng.uniform(0.0, cfg.duration * 0.95))
            s0 = prodmp.BoundaryState(rng.normal(0, 1, 2), rng.normal(0, 1, 2), t_b)
            seq, vel = prodmp.decode(
                table, w, s0, np.array([t_b, t_b + 0.01]), return_velocity=True
            )
            pos_scale = max(1.0, np.max(np.abs(s0.position)))
            vel_scale = max(1.0, np.max(np.abs(s0.velocity)))
            assert np.max(np.abs(seq.values[0] - s0.position)) <= 1e-9 * pos_scale
            assert np.max(np.abs(vel[0] - s0.velocity)) <= 1e-9 * vel_scale


class TestDecode:
    def test_zero_weights_zero_boundary(self, table, cfg):
        s0 = prodmp.BoundaryState(np.zeros(2), np.zeros(2), 0.0)
        seq = prodmp.decode(table, np.zeros(cfg.n_weights), s0, np.linspace(0, 1.2, 13))
        assert np.all(seq.values == 0.0)

    def test_goal_weight_reaches_goal(self, table, cfg):
        w = np.zeros(cfg.n_weights)
        w[cfg.n_basis] = 1.0  # goal of first DoF
        s0 = prodmp.BoundaryState(np.zeros(2), np.zeros(2), 0.0)
        seq = prodmp.decode(table, w, s0, np.linspace(0, 1.2, 25))
        assert abs(seq.values[-1, 0] - 1.0) < 1e-3
        assert np.all(seq.values[:, 1] == 0.0)

    def test_frequency_consistency(self, table, cfg):
        rng = np.random.default_rng(7)
        w = random_weights(rng, cfg)
        s0 = prodmp.BoundaryState(rng.normal(0, 1, 2), rng.normal(0, 1, 2), 0.0)
        coarse = prodmp.decode(table, w, s0, np.arange(0.0, 1.2001, 0.1))
        fine = prodmp.decode(table, w, s0, np.arange(0.0, 1.2001, 0.005))
        assert np.max(np.abs(fine.values[::20] - coarse.values)) <= 1e-12

    def test_affinity_in_weights(self, table, cfg):
        rng = np.random.default_rng(11)
        s0 = prodmp.BoundaryState(np.zeros(2), np.zeros(2), 0.0)
        times = np.linspace(0, 1.2, 31)
        w1 = random_weights(rng, cfg, scale=np.ones(cfg.n_columns))
        w2 = random_weights(rng, cfg, scale=np.ones(cfg.n_columns))
        a, b = 1.7, -0.4
        lhs = prodmp.decode(table, a * w1 + b * w2, s0, times).values
        rhs = a * prodmp.decode(table, w1, s0, times).values + b * prodmp.decode(
            table, w2, s0, times
        ).values
        assert np.max(np.abs(lhs - rhs)) <= 1e-12

    def test_out_of_range_times_rejected(self, table, cfg):
        s0 = prodmp.BoundaryState(np.zeros(2), np.zeros(2), 0.0)
        with pytest.raises(RangeError):
            prodmp.decode(table, np.zeros(cfg.n_weights), s0, np.array([0.0, 1.3]))

    def test_nonmonotone_times_rejected(self, table, cfg):
        s0 = prodmp.BoundaryState(np.zeros(2), np.zeros(2), 0.0)
        with pytest.raises(ContractError):
            prodmp.decode(table, np.zeros(cfg.n_weights), s0, np.array([0.2, 0.1]))


class TestEncode:
    def test_roundtrip_recovers_weights(self, table, cfg):
        rng = np.random.default_rng(13)
        w_true = random_weights(rng, cfg)
        s0 = prodmp.BoundaryState(rng.normal(0, 1, 2), rng.normal(0, 1, 2), 0.0)
        seq = prodmp.decode(table, w_true, s0, np.linspace(0.0, 1.2, 50))
        w_rec = prodmp.encode_least_squares(table, seq, s0, ridge=0.0)
        rel = np.max(np.abs(w_rec - w_true)) / np.max(np.abs(w_true))
        assert rel <= 1e-6

    def test_roundtrip_at_minimum_sample_count(self, table, cfg):
        # 10 * (n_basis + 1) samples is the documented floor for exact recovery.
        rng = np.random.default_rng(17)
        w_true = random_weights(rng, cfg)
        s0 = prodmp.BoundaryState(rng.normal(0, 1, 2), rng.normal(0, 1, 2), 0.0)
        n_samples = 10 * cfg.n_columns
        seq = prodmp.decode(table, w_true, s0, np.linspace(0.0, 1.2, n_samples))
        w_rec = prodmp.encode_least_squares(table, seq, s0, ridge=0.0)
        rel = np.max(np.abs(w_rec - w_true)) / np.max(np.abs(w_true))
        assert rel <= 1e-6

    def test_zero_trajectory_with_ridge_gives_zero_weights(self, table, cfg):
        s0 = prodmp.BoundaryState(np.zeros(2), np.zeros(2), 0.0)
        traj = prodmp.ActionSequence(dt=0.05, start_time=0.0, values=np.zeros((24, 2)))
        w = prodmp.encode_least_squares(table, traj, s0, ridge=1e-6)
        assert np.max(np.abs(w)) <= 1e-12

    def test_noisy_recovery_within_standard_errors(self, table, cfg):
        # Oracle: dense least squares plus normal-equation covariance.
        rng = np.random.default_rng(19)
        w_true = random_weights(rng, cfg)
        s0 = prodmp.BoundaryState(np.zeros(2), np.zeros(2), 0.0)
        times = np.linspace(0.0, 1.2, 120)
        clean = prodmp.decode(table, w_true, s0, times)
        sigma = 1e-2
        noisy_values = clean.values + rng.normal(0.0, sigma, clean.values.shape)
        noisy = prodmp.ActionSequence(dt=clean.dt, start_time=0.0, values=noisy_values)
        w_rec = prodmp.encode_least_squares(table, noisy, s0, ridge=0.0)

        dmap = prodmp.decode_map(table, 0.0, times)
        pos_h, _ = prodmp.boundary_offsets(dmap, s0)
        w_ref, *_ = np.linalg.lstsq(dmap.A, noisy_values - pos_h, rcond=None)
        w_ref = w_ref.T.reshape(-1)
        assert np.allclose(w_rec, w_ref, rtol=1e-6, atol=1e-9)

        cov = sigma**2 * np.linalg.inv(dmap.A.T @ dmap.A)
        se = np.tile(np.sqrt(np.diag(cov)), cfg.dof)
        assert np.all(np.abs(w_rec - w_true) <= 3.0 * se)

    def test_too_few_samples_rejected(self, table, cfg):
        s0 = prodmp.BoundaryState(np.zeros(2), np.zeros(2), 0.0)
        traj = prodmp.ActionSequence(dt=0.1, start_time=0.0, values=np.zeros((2, 2)))
        with pytest.raises(ContractError):
            prodmp.encode_least_squares(table, traj, s0)

    def test_rank_deficient_without_ridge_raises(self, table, cfg):
        # Two distinct samples cannot identify four columns.
        s0 = prodmp.BoundaryState(np.zeros(2), np.zeros(2), 0.0)
        values = np.ones((cfg.n_columns, 2))
        traj = prodmp.ActionSequence(dt=1e-4, start_time=0.0, values=values)
        with pytest.raises(NumericalError):
            prodmp.encode_least_squares(table, traj, s0, ridge=0.0)


class TestBoundaryExactnessProperty:
    def test_thousand_random_cases(self, table, cfg):
        rng = np.random.default_rng(23)
        for _ in range(250):
            w = random_weights(rng, cfg)
            t_b = float(rng.uniform(0.0, cfg.duration * 0.99))
            pos = rng.normal(0.0, 1.0, 2)
            vel = rng.normal(0.0, 1.0, 2)
            s0 = prodmp.BoundaryState(pos, vel, t_b)
            times = np.linspace(t_b, cfg.duration, 5)
            seq, velocities = prodmp.decode(table, w, s0, times, return_velocity=True)
            pos_scale = max(1.0, np.max(np.abs(pos)))
            vel_scale = max(1.0, np.max(np.abs(vel)))
            assert np.max(np.abs(seq.values[0] - pos)) <= 1e-9 * pos_scale
            assert np.max(np.abs(velocities[0] - vel)) <= 1e-9 * vel_scale

"""Window building, normalization stats, and batched weight encoding."""

import numpy as np
import pytest

from motiongen import envs, prodmp
from motiongen import training as tr
from motiongen.errors import ContractError


@pytest.fixture(scope="module")
def dataset():
    return envs.generate_dataset(envs.OBSTACLE, 4, 0)


class TestNormStats:
    def test_stats_cover_dataset(self, dataset):
        norm = tr.compute_norm_stats(dataset)
        for ep in dataset.episodes:
            normed = norm.normalize_actions(ep.actions)
            assert normed.min() >= -1.0 - 1e-12 and normed.max() <= 1.0 + 1e-12
            obs_normed = norm.normalize_obs(ep.observations)
            assert obs_normed.min() >= -1.0 - 1e-12 and obs_normed.max() <= 1.0 + 1e-12


class TestWindows:
    def test_window_counts_and_shapes(self, dataset):
        norm = tr.compute_norm_stats(dataset)
        n, m = 12, 3
        windows = tr.build_windows(dataset, n, m, norm)
        expected = sum(ep.length - n + 1 for ep in dataset.episodes)
        assert len(windows) == expected
        assert windows.actions.shape == (expected, n, dataset.dof)
        assert windows.obs.shape == (expected, m * dataset.obs_dim)

    def test_first_window_padded_and_at_rest(self, dataset):
        norm = tr.compute_norm_stats(dataset)
        windows = tr.build_windows(dataset, 12, 3, norm)
        obs0 = norm.normalize_obs(dataset.episodes[0].observations[0])
        first = windows.obs[0].reshape(3, -1)
        assert np.array_equal(first[0], obs0)
        assert np.array_equal(first[1], obs0)
        assert np.array_equal(first[2], obs0)
        assert np.all(windows.s0_vel[0] == 0.0)

    def test_interior_boundary_velocity_is_central(self, dataset):
        norm = tr.compute_norm_stats(dataset)
        windows = tr.build_windows(dataset, 12, 3, norm)
        ep = dataset.episodes[0]
        act_n = norm.normalize_actions(ep.actions)
        expected = (act_n[3] - act_n[1]) / (2.0 * dataset.dt)
        assert np.allclose(windows.s0_vel[2], expected)

    def test_boundary_position_matches_first_action(self, dataset):
        norm = tr.compute_norm_stats(dataset)
        windows = tr.build_windows(dataset, 12, 3, norm)
        assert np.array_equal(windows.s0_pos, windows.actions[:, 0, :])

    def test_too_short_episodes_rejected(self):
        ep = envs.Episode(
            task=envs.OBSTACLE, dt=0.1, observations=np.zeros((5, 4)),
            actions=np.zeros((5, 2)), seed=0, mode="A", success=True,
        )
        ds = envs.Dataset(task=envs.OBSTACLE, dt=0.1, dof=2, obs_dim=4, episodes=[ep])
        with pytest.raises(ContractError):
            tr.build_windows(ds, 12, 3, tr.compute_norm_stats(ds))


class TestEncodeWindows:
    def test_matches_single_window_encoding(self, dataset):
        norm = tr.compute_norm_stats(dataset)
        windows = tr.build_windows(dataset, 12, 3, norm)
        cfg = prodmp.ProDMPConfig(
            dof=2, n_basis=3, alpha=5.0, duration=1.2, alpha_phase=2.0, grid_dt=1e-3
        )
        table = prodmp.precompute_basis(cfg)
        w_all = tr.encode_windows(table, windows, 0.1, ridge=1e-10)
        for i in range(0, len(windows), 5):
            s0 = prodmp.BoundaryState(windows.s0_pos[i], windows.s0_vel[i], 0.0)
            traj = prodmp.ActionSequence(dt=0.1, start_time=0.0, values=windows.actions[i])
            w_ref = prodmp.encode_least_squares(table, traj, s0, ridge=1e-10)
            assert np.max(np.abs(w_all[i] - w_ref)) <= 1e-8

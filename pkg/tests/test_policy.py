"""Receding-horizon executor tests: planning, seams, windows, rollouts."""

import numpy as np
import pytest

from motiongen import denoiser as dn
from motiongen import diffusion as df
from motiongen import envs
from motiongen import policy as pol
from motiongen import prodmp
from motiongen import training as tr


@pytest.fixture(scope="module")
def obstacle_model():
    """Small untrained (random head) model wired for the obstacle task."""
    rng = np.random.default_rng(31)
    cfg = prodmp.ProDMPConfig(dof=2, n_basis=3, alpha=8.0, duration=1.2, grid_dt=1e-3)
    table = prodmp.precompute_basis(cfg)
    pcfg = pol.PolicyConfig(
        n=12, m=3, dt_low=0.1, dt_high=0.005, execute_steps=12,
        variant="prodmp", max_low_steps=24,
    )
    norm = dn.identity_stats(2, 4)
    params = dn.init_params(
        rng, pcfg.n * 2 + pcfg.m * 4 + 1, (16, 16), cfg.n_weights, norm
    )
    params.weights[-1][:] = rng.normal(0.0, 0.05, params.weights[-1].shape)
    model = df.DiffusionModel(params, table, df.NoiseConfig(sigma_min=0.02),
                              "prodmp", pcfg.n, pcfg.dt_low)
    return model, pcfg


def direct_model_like(model, pcfg, rng):
    norm = dn.identity_stats(2, 4)
    params = dn.init_params(
        rng, pcfg.n * 2 + pcfg.m * 4 + 1, (16, 16), pcfg.n * 2, norm
    )
    params.weights[-1][:] = rng.normal(0.0, 0.05, params.weights[-1].shape)
    return df.DiffusionModel(params, model.table, model.noise, "direct",
                             pcfg.n, pcfg.dt_low)


class TestPlan:
    def test_first_sample_equals_boundary(self, obstacle_model):
        model, pcfg = obstacle_model
        rng = np.random.default_rng(1)
        boundary = prodmp.BoundaryState(np.array([-0.8, 0.0]), np.array([0.1, -0.2]))
        obs = rng.normal(0, 0.5, (pcfg.m, 4))
        result = pol.plan(model, obs, boundary, pcfg, rng)
        assert np.max(np.abs(result.sequence.values[0] - boundary.position)) <= 1e-9
        assert np.max(np.abs(result.velocities[0] - boundary.velocity)) <= 1e-9

    def test_consecutive_plans_continuous(self, obstacle_model):
        model, pcfg = obstacle_model
        rng = np.random.default_rng(2)
        boundary = prodmp.BoundaryState(np.array([-0.8, 0.0]), np.zeros(2))
        obs = rng.normal(0, 0.5, (pcfg.m, 4))
        first = pol.plan(model, obs, boundary, pcfg, rng)
        second = pol.plan(model, obs, first.terminal, pcfg, rng)
        assert np.max(np.abs(second.sequence.values[0] - first.sequence.values[-1])) <= 1e-9
        assert np.max(np.abs(second.velocities[0] - first.velocities[-1])) <= 1e-9

    def test_plan_length_covers_executed_span(self, obstacle_model):
        model, pcfg = obstacle_model
        rng = np.random.default_rng(3)
        boundary = prodmp.BoundaryState(np.zeros(2), np.zeros(2))
        obs = np.zeros((pcfg.m, 4))
        result = pol.plan(model, obs, boundary, pcfg, rng)
        assert result.sequence.length == pcfg.execute_steps * pcfg.ratio + 1
        assert result.sequence.dt == pcfg.dt_high

    def test_direct_upsampling_passes_through_knots(self, obstacle_model):
        model, pcfg = obstacle_model
        rng = np.random.default_rng(4)
        direct = direct_model_like(model, pcfg, rng)
        boundary = prodmp.BoundaryState(np.zeros(2), np.zeros(2))
        obs = rng.normal(0, 0.5, (pcfg.m, 4))
        result = pol.plan(direct, obs, boundary, pcfg, rng)
        assert result.low_frequency is not None
        knots = result.sequence.values[:: pcfg.ratio]
        assert np.allclose(knots[: pcfg.n], result.low_frequency, atol=1e-12)
        # Hold-last covers the final dt_low span beyond the last knot.
        assert np.allclose(result.sequence.values[-1], result.low_frequency[-1])

    def test_bc_plan_boundary_exact(self, obstacle_model):
        model, pcfg = obstacle_model
        rng = np.random.default_rng(5)
        norm = dn.identity_stats(2, 4)
        params = dn.init_params(rng, pcfg.m * 4, (8,), model.table.config.n_weights, norm)
        params.weights[-1][:] = rng.normal(0, 0.05, params.weights[-1].shape)
        bc = pol.BCModel(params, model.table, pcfg.n, pcfg.dt_low)
        boundary = prodmp.BoundaryState(np.array([0.3, -0.4]), np.array([0.05, 0.0]))
        result = pol.plan(bc, rng.normal(0, 0.5, (pcfg.m, 4)), boundary, pcfg, rng)
        assert np.max(np.abs(result.sequence.values[0] - boundary.position)) <= 1e-9

    def test_wrong_window_shape_rejected(self, obstacle_model):
        model, pcfg = obstacle_model
        boundary = prodmp.BoundaryState(np.zeros(2), np.zeros(2))
        with pytest.raises(Exception):
            pol.plan(model, np.zeros((pcfg.m + 1, 4)), boundary, pcfg,
                     np.random.default_rng(0))


class TestRollout:
    def test_determinism(self, obstacle_model):
        model, pcfg = obstacle_model

        def run():
            env = envs.make_env(envs.OBSTACLE)
            env.reset(np.random.default_rng(7))
            return pol.rollout(env, model, pcfg, np.random.default_rng(8))

        t1, t2 = run(), run()
        assert np.array_equal(t1.commands, t2.commands)
        assert np.array_equal(t1.observations, t2.observations)
        assert t1.success == t2.success

    def test_replayed_demonstration_succeeds(self):
        # Oracle policy: replay a demonstrator's actions step for step.
        ds = envs.generate_dataset(envs.OBSTACLE, 2, 13)
        episode = ds.episodes[0]
        env = envs.make_env(envs.OBSTACLE)
        env.reset(np.random.default_rng(np.random.SeedSequence(13).spawn(2)[0]))
        substeps = int(round(episode.dt / env.params.dt_sim))
        for action in episode.actions:
            for _ in range(substeps):
                env.step(action)
        assert env.success(envs.DEMO_SUCCESS_THRESHOLD)

    def test_window_discipline(self, obstacle_model, monkeypatch):
        # The plan at low step i must consume observations i-m+1..i, with
        # repetition padding at the start.
        model, pcfg = obstacle_model
        captured = []
        original = pol.plan

        def spy(model_, window, boundary, cfg_, rng_):
            captured.append(np.array(window, copy=True))
            return original(model_, window, boundary, cfg_, rng_)

        monkeypatch.setattr(pol, "plan", spy)
        env = envs.make_env(envs.OBSTACLE)
        env.reset(np.random.default_rng(9))
        trace = pol.rollout(env, model, pcfg, np.random.default_rng(10))

        first = captured[0]
        assert np.array_equal(first[0], first[1]) and np.array_equal(first[1], first[2])
        assert np.array_equal(first[-1], trace.observations[0])
        if len(captured) > 1:
            second = captured[1]
            i = pcfg.execute_steps
            expected = trace.observations[i - pcfg.m + 1 : i + 1]
            assert np.array_equal(second, expected)

    def test_seams_recorded(self, obstacle_model):
        model, pcfg = obstacle_model
        env = envs.make_env(envs.OBSTACLE)
        env.reset(np.random.default_rng(11))
        trace = pol.rollout(env, model, pcfg, np.random.default_rng(12))
        assert trace.n_plans >= 2
        assert len(trace.seam_pos) == trace.n_plans - 1
        assert max(trace.seam_pos) <= 1e-9
        assert max(trace.seam_vel) <= 1e-9


class TestEvaluate:
    def test_threshold_curve_monotone(self, obstacle_model):
        model, pcfg = obstacle_model
        result = pol.evaluate(
            lambda: envs.make_env(envs.OBSTACLE), model, pcfg,
            6, [0.4, 0.1, 0.2, 0.8], seed=3,
        )
        assert np.all(np.diff(result.thresholds) > 0)
        assert np.all(np.diff(result.success_rates) >= 0.0)

    def test_zero_rollouts_empty_table(self, obstacle_model):
        model, pcfg = obstacle_model
        result = pol.evaluate(
            lambda: envs.make_env(envs.OBSTACLE), model, pcfg, 0, [0.05], seed=0,
        )
        assert result.traces == []
        assert np.all(result.success_rates == 0.0)

    def test_same_seed_identical_tables(self, obstacle_model):
        model, pcfg = obstacle_model
        args = (lambda: envs.make_env(envs.OBSTACLE), model, pcfg, 4, [0.05, 0.2])
        r1 = pol.evaluate(*args, seed=5)
        r2 = pol.evaluate(*args, seed=5)
        assert np.array_equal(r1.success_rates, r2.success_rates)


class TestTraceExport:
    def test_trace_csv_layout(self, obstacle_model, tmp_path):
        model, pcfg = obstacle_model
        env = envs.make_env(envs.OBSTACLE)
        env.reset(np.random.default_rng(20))
        trace = pol.rollout(env, model, pcfg, np.random.default_rng(21))
        path = tmp_path / "trace.csv"
        pol.write_trace_csv(path, trace)
        lines = path.read_text().strip().split("\n")
        assert lines[0].startswith("time,cmd_0,cmd_1,marker_0")
        assert len(lines) == trace.commands.shape[0] + 1

import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udac.actor import ActorConfig
from udac.dataset import generate_mixture
from udac.diffusion import GuidanceConfig
from udac.envs import BehaviorAgent, BehaviorAgentKind, RiskyPointMassConfig
from udac.evaluation import (
    EvalReport,
    ablate_lambda,
    cvar_empirical,
    evaluate,
    export_trajectories,
    imitation_ks,
    ks_statistic,
    rollout,
    scripted_policy,
    udac_policy,
    write_reports,
)
from udac.trainer import Trainer, TrainerConfig, train

ENV = RiskyPointMassConfig()
QUIET = replace(ENV, step_cost_scale=0.0, max_episode_steps=5)

TINY = TrainerConfig(
    batch_size=16,
    gradient_steps=2,
    n_quantiles=3,
    k_quantiles=3,
    diffusion_steps=2,
    critic_hidden=8,
    diffusion_hidden=8,
    classifier_hidden=8,
    actor_hidden=8,
    n_cos=4,
    time_dim=4,
    actor=ActorConfig(n_tau_actor=4),
    guidance=GuidanceConfig(guidance_scale=0.1),
)


def still(states, rng):
    return np.zeros_like(states)


@pytest.fixture(scope="module")
def small_data():
    return generate_mixture(ENV, 10, seed=0)


class TestCvar:
    def test_lowest_single(self):
        assert cvar_empirical(np.arange(1, 11), 0.1) == 1.0

    def test_isolated_loss(self):
        assert cvar_empirical([-10] + [0] * 9, 0.1) == -10.0

    def test_alpha_one_is_mean(self):
        x = np.random.default_rng(0).standard_normal(37)
        assert cvar_empirical(x, 1.0) == pytest.approx(x.mean(), abs=1e-15)

    def test_rounds_tail_size_up(self):
        assert cvar_empirical([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0], 0.1) == 1.5

    @pytest.mark.parametrize("alpha", [0.0, -0.1, 1.1])
    def test_bad_alpha(self, alpha):
        with pytest.raises(ValueError):
            cvar_empirical([1.0], alpha)

    def test_empty(self):
        with pytest.raises(ValueError):
            cvar_empirical([], 0.1)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.floats(0.01, 1.0), st.integers(0, 1000))
    @settings(max_examples=100)
    def test_below_mean_and_order_free(self, values, alpha, seed):
        x = np.array(values)
        c = cvar_empirical(x, alpha)
        assert c <= x.mean() + 1e-9 * (1 + abs(x).max())
        assert cvar_empirical(np.random.default_rng(seed).permutation(x), alpha) == c

    @given(st.floats(-100, 100), st.integers(1, 30))
    def test_constant(self, c, n):
        assert cvar_empirical(np.full(n, c), 0.1) == pytest.approx(c, rel=1e-15, abs=1e-300)


class TestRollout:
    def test_still_policy_on_quiet_env(self):
        rep = evaluate(still, QUIET, episodes=4, seeds=(0,))
        assert rep.mean_return == 0.0 and rep.cvar10_return == 0.0 and rep.violations == 0.0
        assert rep.total_violations == 0 and rep.goal_rate == 0.0
        np.testing.assert_array_equal(rep.lengths, 5)

    def test_deterministic(self):
        pol = scripted_policy(BehaviorAgent(BehaviorAgentKind.DIRECT_TO_GOAL), ENV)
        a, b = evaluate(pol, ENV, 20, (3, 4)), evaluate(pol, ENV, 20, (3, 4))
        np.testing.assert_array_equal(a.returns, b.returns)
        assert a.seeds == (3, 4) and a.episodes == 40

    def test_scripted_agents_violations(self):
        direct = evaluate(scripted_policy(BehaviorAgent(BehaviorAgentKind.DIRECT_TO_GOAL), ENV), ENV, 30)
        detour = evaluate(scripted_policy(BehaviorAgent(BehaviorAgentKind.DETOUR_AROUND_RISK, 0.0), ENV), ENV, 30)
        assert direct.violations > 0
        assert detour.violations == 0.0
        assert direct.goal_rate == detour.goal_rate == 1.0

    def test_report_invariants(self):
        rep = evaluate(scripted_policy(BehaviorAgent(BehaviorAgentKind.UNIFORM_NOISY), ENV), ENV, 20)
        assert rep.cvar10_return <= rep.mean_return and rep.violations >= 0
        assert set(rep.summary()) >= {"mean_return", "cvar10_return", "violations_mean", "violations_total"}

    def test_lockstep_matches_episode_count(self):
        traces = rollout(scripted_policy(BehaviorAgent(BehaviorAgentKind.DIRECT_TO_GOAL), ENV), ENV, 7, 0)
        assert len(traces) == 7 and all(t.reached_goal for t in traces)

    def test_needs_episodes(self):
        with pytest.raises(ValueError):
            rollout(still, ENV, 0, 0)

    def test_from_episodes(self):
        rep = EvalReport.from_episodes([1.0, -3.0], [0, 2], [4, 6], [True, False], (0,))
        assert rep.violations == 1.0 and rep.total_violations == 2 and rep.goal_rate == 0.5


class TestExport:
    def test_row_count_and_header(self, tmp_path):
        path = tmp_path / "traj.csv"
        pol = scripted_policy(BehaviorAgent(BehaviorAgentKind.DIRECT_TO_GOAL), ENV)
        rows = export_trajectories(pol, ENV, 3, path, seed=1)
        lengths = [len(t) for t in rollout(pol, ENV, 3, 1)]
        lines = path.read_text().splitlines()
        assert rows == sum(lengths) and len(lines) == rows + 1
        assert lines[0] == "episode,step,x,y,reward,in_risky"

    def test_steps_contiguous_and_stationary(self, tmp_path):
        path = tmp_path / "traj.csv"
        export_trajectories(still, QUIET, 1, path)
        with open(path) as fh:
            data = list(csv.DictReader(fh))
        assert [int(r["step"]) for r in data] == list(range(5))
        assert len({(r["x"], r["y"]) for r in data}) == 1

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            export_trajectories(still, QUIET, 1, tmp_path / "missing" / "t.csv")


class TestKs:
    def test_identical_samples(self):
        x = np.random.default_rng(0).standard_normal((100, 2))
        assert ks_statistic(x, x) == 0.0

    def test_shift_detected(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2000, 2))
        y = x + np.array([0.0, 1.0])
        assert ks_statistic(x, y) > 0.3

    def test_lambda_zero_imitates(self, small_data):
        models = Trainer(small_data, TINY).models
        assert imitation_ks(models, small_data.states[:200], 0.0, TINY.guidance) == 0.0


class TestReports:
    def test_write_reports(self, tmp_path):
        rep = evaluate(still, QUIET, 2)
        write_reports([({"lambda": 0.5, "seed": 0}, rep)], tmp_path / "r.csv")
        with open(tmp_path / "r.csv") as fh:
            row = next(csv.DictReader(fh))
        assert row["lambda"] == "0.5" and float(row["mean_return"]) == 0.0

    def test_nothing_to_write(self, tmp_path):
        with pytest.raises(ValueError):
            write_reports([], tmp_path / "r.csv")


class TestAblation:
    def test_single_value_matches_direct_run(self, small_data, tmp_path):
        rows = ablate_lambda(small_data, TINY, [0.25], ENV, seeds=(0,), episodes=3, out=tmp_path / "a.csv")
        result = train(small_data, TINY)
        direct = evaluate(udac_policy(result.models, 0.25, TINY.guidance), ENV, 3, (0,))
        assert len(rows) == 1
        np.testing.assert_array_equal(rows[0].report.returns, direct.returns)
        assert len((tmp_path / "a.csv").read_text().splitlines()) == 2

    def test_shared_behavior_rows(self, small_data):
        seen = []
        rows = ablate_lambda(small_data, TINY, [0.0, 1.0], ENV, seeds=(0, 1), episodes=2, share_behavior_steps=2,
                             on_row=seen.append)
        assert [(r.seed, r.lam) for r in rows] == [(0, 0.0), (0, 1.0), (1, 0.0), (1, 1.0)]
        assert seen == rows

    def test_grid_range(self, small_data):
        with pytest.raises(ValueError):
            ablate_lambda(small_data, TINY, [1.5], ENV)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udac import autodiff as ad
from udac.critic import (
    W1_GRID,
    CriticPair,
    ImplicitQuantileCritic,
    QuantileGrid,
    critic_loss,
    distributional_targets,
    empirical_quantiles,
    pairwise_loss,
    quantile_huber,
    td_error,
    w1_from_quantiles,
    wasserstein1_diagnostic,
)
from udac.dataset import Batch
from udac.gradcheck import gradient_error


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def pair(rng):
    return CriticPair.create(3, 2, rng, hidden=8, n_cos=8)


def _batch(rng, n=4, sd=3, ad_=2, dones=None):
    return Batch(
        states=rng.standard_normal((n, sd)),
        actions=rng.uniform(-1, 1, (n, ad_)),
        rewards=rng.standard_normal(n),
        next_states=rng.standard_normal((n, sd)),
        dones=np.zeros(n, bool) if dones is None else np.asarray(dones),
        labels=np.zeros(n, int),
        indices=np.arange(n),
    )


class TestQuantileHuber:
    @pytest.mark.parametrize(
        "delta, tau, kappa, expected",
        [(0.0, 0.3, 1.0, 0.0), (2.0, 0.5, 1.0, 0.75), (0.5, 0.9, 1.0, 0.1125), (-2.0, 0.25, 1.0, 1.125)],
    )
    def test_unit_values(self, delta, tau, kappa, expected):
        assert quantile_huber(np.array(delta), tau, kappa).data == pytest.approx(expected, abs=1e-15)

    @pytest.mark.parametrize("kappa", [0.01, 0.5, 1.0, 3.0])
    @pytest.mark.parametrize("sign", [1.0, -1.0])
    def test_continuous_at_threshold(self, kappa, sign):
        eps = 1e-12
        below = quantile_huber(np.array(sign * (kappa - eps)), 0.3, kappa).data
        above = quantile_huber(np.array(sign * (kappa + eps)), 0.3, kappa).data
        assert abs(below - above) < 1e-9

    def test_kappa_must_be_positive(self):
        with pytest.raises(ValueError):
            quantile_huber(np.array(1.0), 0.5, 0.0)

    @given(st.floats(-50, 50), st.floats(0.001, 0.999), st.floats(0.01, 5))
    def test_non_negative_and_asymmetric(self, delta, tau, kappa):
        pos = float(quantile_huber(np.array(abs(delta)), tau, kappa).data)
        neg = float(quantile_huber(np.array(-abs(delta)), tau, kappa).data)
        assert pos >= 0 and neg >= 0
        # the weight is tau above the quantile and 1 - tau below it
        if pos > 1e-12:
            assert neg / pos == pytest.approx((1 - tau) / tau, rel=1e-9)

    def test_gradient_matches_finite_differences(self, rng):
        delta = ad.Tensor(rng.uniform(-3, 3, 50), requires_grad=True)
        taus = rng.uniform(0, 1, 50)
        assert gradient_error(lambda: ad.tsum(quantile_huber(delta, taus, 1.0)), [delta]) < 1e-6


class TestCritic:
    def test_quantile_shapes(self, pair, rng):
        s, a = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
        assert pair.online.quantiles(s, a, rng.uniform(size=(5, 7))).shape == (5, 7)
        assert pair.online.quantiles(s, a, rng.uniform(size=4)).shape == (5, 4)

    @pytest.mark.parametrize("bad", [-0.1, 1.1, np.nan])
    def test_rejects_levels_outside_unit_interval(self, pair, rng, bad):
        with pytest.raises(ValueError):
            pair.online.quantiles(np.zeros((1, 3)), np.zeros((1, 2)), np.array([[bad]]))

    def test_target_starts_equal(self, pair):
        for o, t in zip(pair.online.parameters(), pair.target.parameters()):
            np.testing.assert_array_equal(o.data, t.data)
            assert o.data is not t.data

    def test_named_parameters_are_unique(self, pair):
        names = list(pair.named_parameters())
        assert len(names) == len(set(names)) == 2 * len(pair.online.parameters())

    def test_quantile_value_agrees_with_batch(self, pair, rng):
        s, a = rng.standard_normal(3), rng.standard_normal(2)
        batch = pair.online.quantiles(s[None], a[None], np.array([[0.3]])).data[0, 0]
        assert pair.online.quantile_value(s, a, 0.3) == batch

    def test_action_gradient(self, pair, rng):
        s = rng.standard_normal((3, 3))
        a = ad.Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        taus = rng.uniform(size=(3, 5))
        assert gradient_error(lambda: ad.tsum(pair.online.quantiles(s, a, taus)), [a]) < 1e-6


class TestTemporalDifference:
    def test_td_error_matches_definition(self, pair, rng):
        s, a, s2, a2 = (rng.standard_normal(k) for k in (3, 2, 3, 2))
        delta = td_error(pair, s, a, 0.4, s2, a2, False, 0.2, 0.7, 0.9)
        expected = 0.4 + 0.9 * pair.target.quantile_value(s2, a2, 0.7) - pair.online.quantile_value(s, a, 0.2)
        assert float(delta.data) == pytest.approx(expected, abs=1e-14)

    def test_done_drops_bootstrap(self, pair, rng):
        s, a = rng.standard_normal(3), rng.standard_normal(2)
        delta = td_error(pair, s, a, 1.0, s, a, True, 0.5, 0.5, 0.99)
        assert float(delta.data) == pytest.approx(1.0 - pair.online.quantile_value(s, a, 0.5))

    def test_gamma_zero_reduces_to_reward(self, pair, rng):
        batch = _batch(rng)
        targets = distributional_targets(pair, batch, rng.standard_normal((4, 2)), rng.uniform(size=(4, 3)), 0.0)
        np.testing.assert_array_equal(targets, np.repeat(batch.rewards[:, None], 3, axis=1))

    def test_gamma_range(self, pair, rng):
        with pytest.raises(ValueError):
            distributional_targets(pair, _batch(rng), np.zeros((4, 2)), np.full(2, 0.5), 1.0)

    def test_terminal_rows_use_reward_only(self, pair, rng):
        batch = _batch(rng, dones=[True, False, True, False])
        targets = distributional_targets(pair, batch, rng.standard_normal((4, 2)), rng.uniform(size=(4, 3)), 0.9)
        np.testing.assert_array_equal(targets[[0, 2]], np.repeat(batch.rewards[[0, 2], None], 3, axis=1))
        assert not np.allclose(targets[1], batch.rewards[1])

    def test_targets_carry_no_gradient(self, pair, rng):
        batch = _batch(rng)
        grid = QuantileGrid.sample(rng, 4, 4, batch=4)
        with ad.Tape() as tape:
            loss = critic_loss(pair, batch, rng.standard_normal((4, 2)), grid, 0.9, 1.0)
        grads = tape.gradient(loss, pair.target.parameters())
        assert all(np.all(g == 0) for g in grads)

    def test_loss_equals_pairwise_mean(self, pair, rng):
        # explicit double loop over (i, j) as an independent oracle
        batch = _batch(rng, n=2)
        next_a = rng.standard_normal((2, 2))
        grid = QuantileGrid(rng.uniform(0.05, 0.95, 3), rng.uniform(0.05, 0.95, 2))
        loss = float(critic_loss(pair, batch, next_a, grid, 0.9, 1.0).data)
        total = 0.0
        for b in range(2):
            for tau in grid.taus:
                for tp in grid.taus_prime:
                    d = td_error(pair, batch.states[b], batch.actions[b], batch.rewards[b], batch.next_states[b],
                                 next_a[b], False, tau, tp, 0.9)
                    total += float(quantile_huber(d, tau, 1.0).data)
        assert loss == pytest.approx(total / (2 * 3 * 2), rel=1e-12)

    def test_loss_gradient(self, pair, rng):
        batch = _batch(rng, n=3)
        grid = QuantileGrid.sample(rng, 3, 3, batch=3)
        next_a = rng.standard_normal((3, 2))
        err = gradient_error(lambda: critic_loss(pair, batch, next_a, grid, 0.9, 1.0), pair.online.parameters())
        assert err < 1e-5

    def test_empty_batch(self, pair, rng):
        with pytest.raises(ValueError):
            critic_loss(pair, _batch(rng, n=0), np.zeros((0, 2)), QuantileGrid(np.full(2, 0.5), np.full(2, 0.5)), 0.9, 1.0)


class TestQuantileGrid:
    def test_open_interval(self):
        with pytest.raises(ValueError):
            QuantileGrid(np.array([0.0, 0.5]), np.array([0.5]))

    def test_per_sample_shapes(self, rng):
        g = QuantileGrid.sample(rng, 8, 6, batch=5)
        assert g.taus.shape == (5, 8) and g.taus_prime.shape == (5, 6)


class TestWassersteinDiagnostic:
    def test_grid(self):
        assert W1_GRID[0] == 0.01 and W1_GRID[-1] == 0.99 and W1_GRID.size == 99

    def test_exact_quantiles_give_zero(self):
        samples = np.repeat([0.0, 1.0], 5000)
        assert w1_from_quantiles(empirical_quantiles(samples), samples) == 0.0

    def test_constant_offset(self):
        samples = np.random.default_rng(0).standard_normal(1000)
        assert w1_from_quantiles(empirical_quantiles(samples) + 0.25, samples) == pytest.approx(0.25)

    def test_needs_samples(self, pair):
        with pytest.raises(ValueError):
            wasserstein1_diagnostic(pair.online, np.zeros(3), np.zeros(2), np.zeros(10))

    @given(st.floats(-5, 5))
    @settings(max_examples=20, deadline=None)
    def test_constant_critic_against_point_mass(self, c):
        crit = ImplicitQuantileCritic.create(1, 1, np.random.default_rng(0), hidden=4, n_cos=4)
        for w in crit.head.weights:
            w.data[:] = 0.0
        crit.head.biases[-1].data[:] = c
        assert wasserstein1_diagnostic(crit, np.zeros(1), np.zeros(1), np.full(200, c)) == pytest.approx(0.0, abs=1e-12)

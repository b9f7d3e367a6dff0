"""Acceptance criteria 1-10, each at its stated tolerance and time budget.

Every test prints one ``criterion N: PASS|FAIL`` line. The end-to-end checks
(7 and 8) take about an hour together on one core.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from udac import autodiff as ad
from udac.actor import ActorConfig, DistortionSpec, PerturbationModel, actor_objective, cpw_distortion_tau, distorted_value, wang_distortion_tau
from udac.benchmarks import (
    DESK_BEHAVIOR_BATCH,
    DESK_BEHAVIOR_STEPS,
    bandit_dataset,
    chain_dataset,
    chain_mdp,
    desk_env_config,
    desk_trainer_config,
    split_modes,
    two_mode_dataset,
)
from udac.critic import CriticPair, ImplicitQuantileCritic, quantile_huber, wasserstein1_diagnostic
from udac.dataset import generate_mixture
from udac.diffusion import NO_GUIDANCE, EpsilonModel, GuidanceClassifier, GuidanceConfig, diffusion_loss, reverse_sample, vp_schedule
from udac.envs import chain_mdp_oracle
from udac.evaluation import cvar_empirical, evaluate, imitation_ks, udac_policy
from udac.gradcheck import gradient_error
from udac.trainer import Trainer, TrainerConfig, TrainLog, fit_critic, pretrain_behavior, train

GRAD_CASES = 100
GRAD_TOL = 1e-5
SEEDS = (0, 1, 2, 3, 4)
EPISODES = 100
LAMBDA_GRID = (0.01, 0.25, 0.5, 0.75, 1.0)


def verdict(capsys, number: int, ok: bool, detail: str, elapsed: float) -> None:
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} ({detail}; {elapsed:.1f}s)")


def worst_error(make_case, cases: int = GRAD_CASES) -> float:
    worst = 0.0
    for k in range(cases):
        loss_fn, params = make_case(np.random.default_rng(1000 + k))
        worst = max(worst, gradient_error(loss_fn, params))
    return worst


def mlp_case(rng):
    net = ad.init_mlp([3, 4, 4, 2], rng)
    x = rng.standard_normal((5, 3))
    w = rng.standard_normal((5, 2))
    return lambda: ad.tsum(ad.mul(w, net(x))), net.parameters()


def huber_case(rng):
    delta = ad.Tensor(rng.uniform(-3.0, 3.0, (4, 6)), requires_grad=True)
    taus = rng.uniform(0.01, 0.99, (4, 6))
    kappa = float(rng.uniform(0.2, 2.0))
    return lambda: ad.tsum(quantile_huber(delta, taus, kappa)), [delta]


def diffusion_case(rng):
    model = EpsilonModel.create(2, 2, rng, hidden=4, time_dim=4)
    schedule = vp_schedule(5)
    states, actions = rng.standard_normal((4, 2)), rng.uniform(-1.0, 1.0, (4, 2))
    seed = int(rng.integers(1 << 30))
    return lambda: diffusion_loss(model, schedule, states, actions, np.random.default_rng(seed)), model.parameters()


def actor_case(rng):
    actor = PerturbationModel.create(2, 2, rng, hidden=4)
    critic = ImplicitQuantileCritic.create(2, 2, rng, hidden=4, n_cos=4)
    states, beta = rng.standard_normal((4, 2)), rng.uniform(-0.5, 0.5, (4, 2))
    spec = DistortionSpec.parse(["cvar:0.1", "mean", "wang:-0.75", "cpw:0.71"][int(rng.integers(4))])
    cfg = ActorConfig(lam=0.25, distortion=spec, n_tau_actor=4)
    seed = int(rng.integers(1 << 30))
    return lambda: actor_objective(actor, critic, states, beta, cfg, np.random.default_rng(seed)), actor.parameters()


def classifier_case(rng):
    clf = GuidanceClassifier.create(2, 2, rng, hidden=4, time_dim=4)
    latents = ad.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    states, labels, i = rng.standard_normal((4, 2)), rng.integers(0, 2, 4), int(rng.integers(0, 6))
    return lambda: ad.tsum(ad.pick(clf.log_probs(latents, states, i), labels)), clf.parameters() + [latents]


class TestAnalytic:
    @pytest.mark.parametrize(
        "name, make_case",
        [("mlp", mlp_case), ("huber", huber_case), ("diffusion loss", diffusion_case),
         ("actor objective", actor_case), ("classifier logprob", classifier_case)],
    )
    def test_c1_gradient_suite(self, name, make_case, capsys):
        start = time.perf_counter()
        err = worst_error(make_case)
        elapsed = time.perf_counter() - start
        ok = err < GRAD_TOL and elapsed < 60.0
        verdict(capsys, 1, ok, f"{name}: worst rel err {err:.2e} over {GRAD_CASES} cases", elapsed)
        assert ok

    def test_c2_huber_unit_values(self, capsys):
        start = time.perf_counter()
        h = lambda d, tau, k: float(quantile_huber(np.array([d]), np.array([tau]), k).data[0])
        eps = 1e-12
        values = [h(0.0, 0.3, 1.0), h(2.0, 0.5, 1.0), h(0.5, 0.9, 1.0)]
        jump = max(abs(h(s * (1 + eps), 0.3, 1.0) - h(s * (1 - eps), 0.3, 1.0)) for s in (-1.0, 1.0))
        ok = values[0] == 0.0 and abs(values[1] - 0.75) < 1e-12 and abs(values[2] - 0.1125) < 1e-12 and jump < 1e-9
        verdict(capsys, 2, ok, f"values {values}, jump at kappa {jump:.1e}", time.perf_counter() - start)
        assert ok

    def test_c10_distortion_oracles(self, capsys):
        start = time.perf_counter()

        class Identity:
            def quantiles(self, states, actions, taus):
                return ad.Tensor(np.asarray(taus, dtype=np.float64))

            def frozen(self):
                return self

        rng = np.random.default_rng(0)
        s, a = np.zeros((1, 1)), np.zeros((1, 1))
        cvar = float(distorted_value(Identity(), s, a, DistortionSpec.parse("cvar:0.1"), 10_000, rng).data[0])
        full = float(distorted_value(Identity(), s, a, DistortionSpec.parse("cvar:1"), 10_000, rng).data[0])
        mean = float(distorted_value(Identity(), s, a, DistortionSpec.parse("mean"), 10_000, rng).data[0])
        tau = np.linspace(0.01, 0.99, 99)
        identities = np.allclose(wang_distortion_tau(tau, 0.0), tau, atol=1e-15) and np.allclose(
            cpw_distortion_tau(tau, 1.0), tau, atol=1e-15
        )
        empirical = cvar_empirical(np.arange(1, 11), 0.1)
        ok = abs(cvar - 0.05) <= 0.005 and abs(full - mean) < 1e-3 and identities and empirical == 1.0
        detail = f"CVaR0.1 {cvar:.4f}, CVaR1 {full:.4f} vs mean {mean:.4f}, empirical {empirical}"
        verdict(capsys, 10, ok, detail, time.perf_counter() - start)
        assert ok


class TestCritic:
    def test_c3_bandit_fixed_point(self, capsys):
        start = time.perf_counter()
        pair = CriticPair.create(1, 1, np.random.default_rng(0), hidden=64, n_cos=64)
        fit_critic(pair, bandit_dataset(), lambda s: np.zeros((len(s), 1)), 5000, np.random.default_rng(1),
                   batch_size=32, kappa=0.01)
        truth = np.repeat([0.0, 1.0], 5000)
        w1 = wasserstein1_diagnostic(pair.online, np.zeros(1), np.zeros(1), truth)
        elapsed = time.perf_counter() - start
        ok = w1 < 0.05 and elapsed < 120.0
        verdict(capsys, 3, ok, f"W1 {w1:.4f} after 5000 steps", elapsed)
        assert ok

    def test_c4_chain_cvar(self, capsys):
        start = time.perf_counter()
        mdp = chain_mdp(gamma=0.9)
        oracle = cvar_empirical(chain_mdp_oracle(mdp, np.ones((3, 1)), 0, samples=100_000), 0.1)
        pair = CriticPair.create(3, 1, np.random.default_rng(0), hidden=64, n_cos=64)
        fit_critic(pair, chain_dataset(mdp), lambda s: np.zeros((len(s), 1)), 5000, np.random.default_rng(1),
                   batch_size=64, gamma=0.9, kappa=0.01, lr=3e-4, mu=0.05, n_quantiles=16, k_quantiles=16)
        taus = (np.arange(100) + 0.5) / 100 * 0.1
        critic = float(pair.online.quantiles(np.array([[1.0, 0.0, 0.0]]), np.zeros((1, 1)), taus).data.mean())
        rel = abs(critic - oracle) / abs(oracle)
        elapsed = time.perf_counter() - start
        ok = rel < 0.1 and elapsed < 300.0
        verdict(capsys, 4, ok, f"critic CVaR0.1 {critic:.4f} vs oracle {oracle:.4f}, rel err {rel:.3f}", elapsed)
        assert ok


@pytest.fixture(scope="module")
def two_mode():
    start = time.perf_counter()
    cfg = TrainerConfig(diffusion_hidden=64, classifier_hidden=64, diffusion_steps=20, seed=0)
    diffusion, classifier = pretrain_behavior(two_mode_dataset(), cfg, 8000, batch_size=256)
    return diffusion, classifier, vp_schedule(20), time.perf_counter() - start


class TestDiffusion:
    def test_c5_mode_coverage(self, two_mode, capsys):
        diffusion, _, schedule, fit_time = two_mode
        start = time.perf_counter()
        samples = reverse_sample(diffusion, schedule, np.zeros((1000, 1)), np.random.default_rng(5), NO_GUIDANCE, None, 1)
        pos_share, pos_center, neg_share, neg_center = split_modes(samples)
        elapsed = fit_time + time.perf_counter() - start
        ok = (min(pos_share, neg_share) >= 0.3 and abs(pos_center - 0.7) < 0.1 and abs(neg_center + 0.7) < 0.1
              and elapsed < 180.0)
        detail = f"+mode {pos_share:.3f} at {pos_center:.3f}, -mode {neg_share:.3f} at {neg_center:.3f}"
        verdict(capsys, 5, ok, detail, elapsed)
        assert ok

    def test_c6_guidance_shift(self, two_mode, capsys):
        diffusion, classifier, schedule, fit_time = two_mode
        start = time.perf_counter()
        states = np.zeros((1000, 1))
        plain = reverse_sample(diffusion, schedule, states, np.random.default_rng(5), NO_GUIDANCE, None, 1)
        guide = GuidanceConfig(target_class=0, guidance_scale=0.3)
        guided = reverse_sample(diffusion, schedule, states, np.random.default_rng(5), guide, classifier, 1)
        plain_share, guided_share = split_modes(plain)[0], split_modes(guided)[0]
        elapsed = fit_time + time.perf_counter() - start
        ok = guided_share >= 0.9 and plain_share <= 0.7 and elapsed < 180.0
        verdict(capsys, 6, ok, f"label-0 share guided {guided_share:.3f}, unguided {plain_share:.3f}", elapsed)
        assert ok


TINY = TrainerConfig(
    batch_size=8,
    gradient_steps=12,
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


class TestPersistence:
    def test_c9_determinism_and_replay(self, tmp_path, capsys):
        start = time.perf_counter()
        data = generate_mixture(desk_env_config(), 6, seed=0)
        same = train(data, TINY).log.bitwise_equal(train(data, TINY).log)
        straight = Trainer(data, TINY)
        straight.run(12)
        first = Trainer(data, TINY)
        first.run(2)
        first.save(tmp_path / "ck")
        resumed = Trainer.restore(tmp_path / "ck", data)
        resumed.run(10)
        replay = resumed.log.bitwise_equal(straight.log) and all(
            np.array_equal(p.data, straight.models.named_parameters()[k].data)
            for k, p in resumed.models.named_parameters().items()
        )
        written = tmp_path / "log.csv"
        straight.log.write_csv(written)
        roundtrip = TrainLog.read_csv(written).bitwise_equal(straight.log)
        ok = same and replay and roundtrip
        verdict(capsys, 9, ok, f"same-seed log equal {same}, 2+10 replay equal {replay}, csv round trip {roundtrip}",
                time.perf_counter() - start)
        assert ok


@pytest.fixture(scope="module")
def desk():
    """Dataset, per-seed behaviour fits and finished runs, shared by the end-to-end criteria."""
    env = desk_env_config()
    return {"env": env, "data": generate_mixture(env, 200, seed=0), "behavior": {}, "runs": {}}


def behavior_for(desk, seed: int):
    if seed not in desk["behavior"]:
        base = desk_trainer_config(seed=seed)
        desk["behavior"][seed] = pretrain_behavior(desk["data"], base, DESK_BEHAVIOR_STEPS, DESK_BEHAVIOR_BATCH)
    return desk["behavior"][seed]


def run_for(desk, seed: int, distortion: str, lam: float):
    key = (seed, distortion, lam)
    if key not in desk["runs"]:
        cfg = desk_trainer_config(seed=seed, distortion=distortion, lam=lam)
        models = train(desk["data"], cfg, behavior=behavior_for(desk, seed)).models
        report = evaluate(udac_policy(models, lam, cfg.guidance), desk["env"], EPISODES, (seed,))
        desk["runs"][key] = (models, report)
    return desk["runs"][key]


def pooled(reports):
    returns = np.concatenate([r.returns for r in reports])
    return cvar_empirical(returns, 0.1), float(np.mean([r.violations for r in reports]))


@pytest.mark.slow
class TestEndToEnd:
    def test_c7_cvar_beats_mean(self, desk, capsys):
        start = time.perf_counter()
        cvar_runs = [run_for(desk, s, "cvar:0.1", 0.25)[1] for s in SEEDS]
        mean_runs = [run_for(desk, s, "mean", 0.25)[1] for s in SEEDS]
        cvar_tail, cvar_viol = pooled(cvar_runs)
        mean_tail, mean_viol = pooled(mean_runs)
        elapsed = time.perf_counter() - start
        ok = cvar_viol <= 0.5 * mean_viol and cvar_tail > mean_tail and elapsed < 1800.0
        detail = (f"violations/episode CVaR {cvar_viol:.2f} vs Mean {mean_viol:.2f}; "
                  f"CVaR10 return CVaR {cvar_tail:.1f} vs Mean {mean_tail:.1f}")
        verdict(capsys, 7, ok, detail, elapsed)
        assert ok

    def test_c8_lambda_ablation(self, desk, capsys):
        start = time.perf_counter()
        wins, ks = 0, []
        table = []
        for seed in SEEDS:
            tails = {lam: run_for(desk, seed, "cvar:0.1", lam)[1].cvar10_return for lam in LAMBDA_GRID}
            table.append(tails)
            interior = max(tails[lam] for lam in (0.25, 0.5, 0.75))
            wins += interior > max(tails[0.01], tails[1.0])
            models = run_for(desk, seed, "cvar:0.1", 0.01)[0]
            rows = np.random.default_rng(seed).choice(len(desk["data"]), 1000, replace=False)
            ks.append(imitation_ks(models, desk["data"].states[rows], 0.01, desk_trainer_config().guidance, seed))
        elapsed = time.perf_counter() - start
        ok = wins >= 4 and max(ks) < 0.05 and elapsed < 2700.0
        curves = "; ".join(" ".join(f"{lam}:{v:.0f}" for lam, v in t.items()) for t in table)
        verdict(capsys, 8, ok, f"interior wins {wins}/5, max KS at 0.01 {max(ks):.4f}; CVaR10 by lambda {curves}", elapsed)
        assert ok

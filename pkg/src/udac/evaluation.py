"""Policy rollouts, risk metrics, lambda sweeps and trajectory export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import ks_2samp

from .diffusion import GuidanceConfig
from .envs import BehaviorAgent, RiskyPointMass, RiskyPointMassConfig, scripted_action
from .dataset import OfflineDataset
from .trainer import TrainerConfig, UDACModels, pretrain_behavior, train

# policy(states (n, state_dim), rng) -> environment-unit actions (n, action_dim)
Policy = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def cvar_empirical(returns, alpha: float = 0.1) -> float:
    """Mean of the ceil(alpha * n) smallest values."""
    values = np.sort(np.asarray(returns, dtype=np.float64).ravel())
    if values.size == 0:
        raise ValueError("cvar of an empty array")
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    k = max(1, math.ceil(alpha * values.size - 1e-12))
    return float(values[:k].mean())


@dataclass
class EvalReport:
    episodes: int
    mean_return: float
    median_return: float
    cvar10_return: float
    violations: float
    total_violations: int
    returns: np.ndarray
    lengths: np.ndarray
    goal_rate: float
    seeds: tuple[int, ...] = ()

    @classmethod
    def from_episodes(cls, returns, violations, lengths, reached, seeds: Sequence[int]) -> "EvalReport":
        returns = np.asarray(returns, dtype=np.float64)
        violations = np.asarray(violations, dtype=np.int64)
        return cls(
            episodes=returns.size,
            mean_return=float(returns.mean()),
            median_return=float(np.median(returns)),
            cvar10_return=cvar_empirical(returns, 0.1),
            violations=float(violations.mean()),
            total_violations=int(violations.sum()),
            returns=returns,
            lengths=np.asarray(lengths, dtype=np.int64),
            goal_rate=float(np.mean(reached)),
            seeds=tuple(int(s) for s in seeds),
        )

    def summary(self) -> dict[str, float]:
        return {
            "episodes": self.episodes,
            "mean_return": self.mean_return,
            "median_return": self.median_return,
            "cvar10_return": self.cvar10_return,
            "violations_mean": self.violations,
            "violations_total": self.total_violations,
            "mean_length": float(self.lengths.mean()),
            "goal_rate": self.goal_rate,
        }


@dataclass
class EpisodeTrace:
    positions: list[np.ndarray] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    in_risky: list[bool] = field(default_factory=list)
    reached_goal: bool = False

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def total_return(self) -> float:
        return float(np.sum(self.rewards))


def rollout(policy: Policy, env_config: RiskyPointMassConfig, episodes: int, seed: int) -> list[EpisodeTrace]:
    """Run ``episodes`` in lockstep, batching policy calls over the still-active episodes.

    Each episode owns an environment rng spawned from ``seed``; the policy gets
    one further stream, so results are deterministic given ``seed``.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = RiskyPointMass(env_config)
    streams = np.random.SeedSequence(seed).spawn(episodes + 1)
    policy_rng = np.random.default_rng(streams[-1])
    states = [env.reset(np.random.default_rng(s)) for s in streams[:-1]]
    traces = [EpisodeTrace() for _ in range(episodes)]
    active = list(range(episodes))
    while active:
        obs = np.stack([states[k].position for k in active])
        actions = np.asarray(policy(obs, policy_rng), dtype=np.float64)
        still = []
        for row, k in enumerate(active):
            res = env.step(states[k], actions[row])
            states[k] = res.next_state
            tr = traces[k]
            tr.positions.append(res.next_state.position.copy())
            tr.rewards.append(res.reward)
            tr.in_risky.append(res.in_risky_region)
            if res.done:
                tr.reached_goal = res.reached_goal
            else:
                still.append(k)
        active = still
    return traces


def evaluate(
    policy: Policy, env_config: RiskyPointMassConfig, episodes: int = 100, seeds: Sequence[int] = (0,)
) -> EvalReport:
    """Pool ``episodes`` rollouts per evaluation seed into one report."""
    traces = [tr for s in seeds for tr in rollout(policy, env_config, episodes, s)]
    return EvalReport.from_episodes(
        [tr.total_return for tr in traces],
        [sum(tr.in_risky) for tr in traces],
        [len(tr) for tr in traces],
        [tr.reached_goal for tr in traces],
        seeds,
    )


def udac_policy(models: UDACModels, lam: float, guidance: GuidanceConfig) -> Policy:
    def policy(states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return models.act(states, rng, lam, guidance)

    return policy


def scripted_policy(agent: BehaviorAgent, env_config: RiskyPointMassConfig, side: int = 1) -> Policy:
    def policy(states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return np.stack([scripted_action(agent, s, env_config, rng, side) for s in states])

    return policy


def ks_statistic(x, y) -> float:
    """Largest per-dimension two-sample Kolmogorov-Smirnov statistic."""
    x, y = np.atleast_2d(np.asarray(x, dtype=np.float64)), np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] == 1:
        x, y = x.T, y.T
    return float(max(ks_2samp(x[:, d], y[:, d]).statistic for d in range(x.shape[1])))


def imitation_ks(models: UDACModels, states, lam: float, guidance: GuidanceConfig, seed: int = 0) -> float:
    """KS distance between policy actions and the diffusion samples they perturb.

    Both use the same behaviour draws, so the distance isolates the perturbation.
    """
    rng = np.random.default_rng(seed)
    beta = models.sample_behavior(np.asarray(states, dtype=np.float64), rng, guidance)
    actions = np.clip(lam * models.actor(states, beta).data + beta, -1.0, 1.0)
    return ks_statistic(actions, beta)


def export_trajectories(policy: Policy, env_config: RiskyPointMassConfig, episodes: int, path, seed: int = 0) -> int:
    """Write ``episode,step,x,y,reward,in_risky`` rows; returns the number of data rows."""
    traces = rollout(policy, env_config, episodes, seed)
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "step", "x", "y", "reward", "in_risky"])
        for ep, tr in enumerate(traces):
            for t, (pos, r, risky) in enumerate(zip(tr.positions, tr.rewards, tr.in_risky)):
                w.writerow([ep, t, repr(float(pos[0])), repr(float(pos[1])), repr(float(r)), int(risky)])
                rows += 1
    return rows


def write_reports(rows: Sequence[tuple[dict, EvalReport]], path) -> None:
    """CSV with the key columns of each row followed by the report summary."""
    if not rows:
        raise ValueError("nothing to write")
    keys = list(rows[0][0])
    metric_names = list(rows[0][1].summary())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + metric_names)
        for key, rep in rows:
            summary = rep.summary()
            w.writerow([key[k] for k in keys] + [summary[m] for m in metric_names])


@dataclass
class AblationRow:
    lam: float
    seed: int
    report: EvalReport


def ablate_lambda(
    dataset: OfflineDataset,
    config: TrainerConfig,
    lambda_grid: Sequence[float],
    env_config: RiskyPointMassConfig,
    seeds: Sequence[int] = (0,),
    episodes: int = 100,
    share_behavior_steps: int = 0,
    out: str | Path | None = None,
    on_row: Callable[[AblationRow], None] | None = None,
) -> list[AblationRow]:
    """Train and evaluate one model per (seed, lambda).

    With ``share_behavior_steps > 0`` the diffusion model and classifier are
    fitted once per seed and every lambda run starts from that fit.
    """
    if any(not 0.0 <= lam <= 1.0 for lam in lambda_grid):
        raise ValueError("lambda grid values must lie in [0, 1]")
    rows: list[AblationRow] = []
    for seed in seeds:
        base = replace(config, seed=int(seed))
        behavior = pretrain_behavior(dataset, base, share_behavior_steps) if share_behavior_steps else None
        for lam in lambda_grid:
            cfg = replace(base, actor=replace(base.actor, lam=float(lam)))
            result = train(dataset, cfg, behavior=behavior)
            report = evaluate(udac_policy(result.models, lam, cfg.guidance), env_config, episodes, (int(seed),))
            row = AblationRow(float(lam), int(seed), report)
            rows.append(row)
            if on_row is not None:
                on_row(row)
    if out is not None:
        write_reports([({"lambda": r.lam, "seed": r.seed}, r.report) for r in rows], out)
    return rows

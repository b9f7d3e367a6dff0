"""Small synthetic problems with known answers, and the desk-scale configuration for the risky task."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .actor import ActorConfig, DistortionSpec
from .dataset import OfflineDataset
from .diffusion import GuidanceConfig
from .envs import RiskyPointMassConfig, TabularMDP
from .trainer import TrainerConfig

_UNIT = (np.array([-1.0]), np.array([1.0]))


def bandit_dataset(n: int = 1000, p: float = 0.5, seed: int = 0) -> OfflineDataset:
    """One state, one action, reward Bernoulli(p) over {0, 1}, every transition terminal."""
    rng = np.random.default_rng(seed)
    zeros = np.zeros((n, 1))
    return OfflineDataset(
        states=zeros,
        actions=zeros.copy(),
        rewards=(rng.random(n) < p).astype(np.float64),
        next_states=zeros.copy(),
        dones=np.ones(n, dtype=bool),
        labels=np.zeros(n, dtype=np.int64),
        action_low=_UNIT[0],
        action_high=_UNIT[1],
    )


def chain_mdp(gamma: float = 0.9) -> TabularMDP:
    """s0 -> s1 -> s2 (terminal), one action, several reward atoms per step."""
    values = np.zeros((3, 1, 5))
    probs = np.zeros((3, 1, 5))
    values[0, 0] = [0.0, 0.5, 1.0, 1.5, 2.0]
    probs[0, 0] = [0.2, 0.2, 0.2, 0.2, 0.2]
    values[1, 0] = [-3.0, -1.0, 0.5, 1.0, 2.5]
    probs[1, 0] = [0.06, 0.1, 0.34, 0.3, 0.2]
    values[2, 0, 0] = 0.0
    probs[2, 0, 0] = 1.0
    transitions = np.zeros((3, 1, 3))
    transitions[0, 0, 1] = transitions[1, 0, 2] = transitions[2, 0, 2] = 1.0
    return TabularMDP(transitions, values, probs, gamma, terminal=np.array([False, False, True]))


def chain_dataset(mdp: TabularMDP, n: int = 4000, seed: int = 0) -> OfflineDataset:
    """Transitions drawn uniformly from the non-terminal states; states one-hot."""
    rng = np.random.default_rng(seed)
    live = np.flatnonzero(~mdp.terminal)
    s = rng.choice(live, size=n)
    eye = np.eye(mdp.n_states)
    rewards = np.empty(n)
    nxt = np.empty(n, dtype=np.int64)
    for row, state in enumerate(s):
        k = rng.choice(mdp.reward_values.shape[-1], p=mdp.reward_probs[state, 0])
        rewards[row] = mdp.reward_values[state, 0, k]
        nxt[row] = rng.choice(mdp.n_states, p=mdp.transitions[state, 0])
    return OfflineDataset(
        states=eye[s],
        actions=np.zeros((n, 1)),
        rewards=rewards,
        next_states=eye[nxt],
        dones=mdp.terminal[nxt],
        labels=np.zeros(n, dtype=np.int64),
        action_low=_UNIT[0],
        action_high=_UNIT[1],
    )


def two_mode_dataset(n: int = 2000, mode: float = 0.7, spread: float = 0.05, seed: int = 0) -> OfflineDataset:
    """One state whose actions split evenly between +mode (label 0) and -mode (label 1)."""
    rng = np.random.default_rng(seed)
    sign = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    actions = np.clip(sign * mode + spread * rng.standard_normal(n), -1.0, 1.0)[:, None]
    zeros = np.zeros((n, 1))
    return OfflineDataset(
        states=zeros,
        actions=actions,
        rewards=np.zeros(n),
        next_states=zeros.copy(),
        dones=np.ones(n, dtype=bool),
        labels=(sign < 0).astype(np.int64),
        action_low=_UNIT[0],
        action_high=_UNIT[1],
    )


def split_modes(samples: np.ndarray) -> tuple[float, float, float, float]:
    """(share, center) of the positive and negative clusters of 1-D samples."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    pos, neg = x[x > 0], x[x <= 0]
    center = lambda v: float(v.mean()) if v.size else float("nan")
    return pos.size / x.size, center(pos), neg.size / x.size, center(neg)


def desk_env_config() -> RiskyPointMassConfig:
    return RiskyPointMassConfig()


DESK_BEHAVIOR_STEPS = 8000
DESK_BEHAVIOR_BATCH = 256


def desk_trainer_config(seed: int = 0, distortion: str = "cvar:0.1", lam: float = 0.25) -> TrainerConfig:
    """Sizes and rates that fit the end-to-end risky-task runs into minutes on one CPU."""
    return TrainerConfig(
        batch_size=128,
        gradient_steps=1500,
        mu=0.05,
        huber_kappa=0.05,
        diffusion_hidden=128,
        classifier_hidden=128,
        actor_hidden=64,
        critic_hidden=64,
        reward_scale=0.01,
        seed=seed,
        guidance=GuidanceConfig(guidance_scale=0.3),
        actor=replace(ActorConfig(), lam=lam, distortion=DistortionSpec.parse(distortion), n_tau_actor=8),
    )

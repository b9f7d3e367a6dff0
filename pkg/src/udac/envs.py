"""Risky 2-D point-mass navigation, scripted behaviour agents and a tabular MDP sampler."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class RiskyPointMassConfig:
    """Geometry and reward constants.

    Reward per step is ``-step_cost_scale * ||pos - goal||`` minus
    ``penalty_magnitude`` when the new position is inside the risky disk and an
    independent Bernoulli(``penalty_probability``) fires.
    """

    arena_half_width: float = 1.0
    # (x_low, x_high, y_low, y_high)
    start_region: tuple[float, float, float, float] = (-1.0, -0.8, -0.1, 0.1)
    goal_position: tuple[float, float] = (0.9, 0.0)
    goal_radius: float = 0.1
    risky_center: tuple[float, float] = (0.0, 0.0)
    risky_radius: float = 0.3
    max_action_magnitude: float = 0.1
    # Euclidean displacement limit per step; 0 disables it
    speed_limit: float = 0.1
    max_episode_steps: int = 100
    penalty_magnitude: float = 70.0
    penalty_probability: float = 0.1
    step_cost_scale: float = 30.0
    detour_margin: float = 0.1

    def __post_init__(self) -> None:
        x0, x1, y0, y1 = self.start_region
        if x0 > x1 or y0 > y1:
            raise ValueError("start_region must be (x_low, x_high, y_low, y_high) with low <= high")
        if not 0.0 < self.penalty_probability <= 1.0:
            raise ValueError("penalty_probability must lie in (0, 1]")
        if self.penalty_magnitude <= 0:
            raise ValueError("penalty_magnitude must be positive")
        if self.max_action_magnitude <= 0 or self.max_episode_steps < 1:
            raise ValueError("action cap and episode length must be positive")
        start = np.array([(x0 + x1) / 2, (y0 + y1) / 2])
        if _segment_distance(start, np.asarray(self.goal_position), np.asarray(self.risky_center)) >= self.risky_radius:
            raise ValueError("risky disk must intersect the straight path from start to goal")

    @property
    def max_distance(self) -> float:
        return 2.0 * math.sqrt(2.0) * self.arena_half_width

    @property
    def state_dim(self) -> int:
        return 2

    @property
    def action_dim(self) -> int:
        return 2


def _segment_distance(p: np.ndarray, q: np.ndarray, c: np.ndarray) -> float:
    d = q - p
    denom = float(d @ d)
    t = 0.0 if denom == 0 else float(np.clip((c - p) @ d / denom, 0.0, 1.0))
    return float(np.linalg.norm(p + t * d - c))


_TUPLE_FIELDS = {"start_region", "goal_position", "risky_center"}


def save_env_config(config: RiskyPointMassConfig, path: str | Path) -> None:
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if f.name in _TUPLE_FIELDS:
            value = ", ".join(repr(float(v)) for v in value)
        lines.append(f"{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_env_config(path: str | Path) -> RiskyPointMassConfig:
    """Parse ``key = value`` lines; unknown keys are an error, missing keys keep defaults."""
    kinds = {f.name: f.type for f in fields(RiskyPointMassConfig)}
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        if key in _TUPLE_FIELDS:
            values[key] = tuple(float(v) for v in value.split(","))
        elif key == "max_episode_steps":
            values[key] = int(value)
        else:
            values[key] = float(value)
    return RiskyPointMassConfig(**values)


@dataclass
class EnvState:
    position: np.ndarray
    step_index: int
    rng: np.random.Generator


@dataclass
class StepResult:
    next_state: EnvState
    reward: float
    done: bool
    in_risky_region: bool
    penalty_fired: bool
    reached_goal: bool = False


class RiskyPointMass:
    """Stateless step functions over :class:`EnvState` for one config."""

    def __init__(self, config: RiskyPointMassConfig | None = None):
        self.config = config or RiskyPointMassConfig()
        self._goal = np.asarray(self.config.goal_position, dtype=np.float64)
        self._center = np.asarray(self.config.risky_center, dtype=np.float64)

    def reset(self, seed: int | np.random.Generator) -> EnvState:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        x0, x1, y0, y1 = self.config.start_region
        pos = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        return EnvState(pos, 0, rng)

    def displacement(self, action: np.ndarray) -> np.ndarray:
        cap = self.config.max_action_magnitude
        move = np.clip(action, -cap, cap)
        limit = self.config.speed_limit
        norm = float(np.linalg.norm(move))
        if limit > 0 and norm > limit:
            move = move * (limit / norm)
        return move

    def in_risky(self, position: np.ndarray) -> bool:
        return bool(np.linalg.norm(position - self._center) < self.config.risky_radius)

    def base_reward(self, position: np.ndarray) -> float:
        return -float(np.linalg.norm(position - self._goal)) * self.config.step_cost_scale

    def step(self, state: EnvState, action) -> StepResult:
        cfg = self.config
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (2,) or not np.all(np.isfinite(action)):
            raise ValueError(f"action must be a finite 2-vector, got {action!r}")
        pos = np.clip(state.position + self.displacement(action), -cfg.arena_half_width, cfg.arena_half_width)
        risky = self.in_risky(pos)
        fired = False
        reward = self.base_reward(pos)
        if risky:
            # the draw is only consumed inside the disk
            fired = bool(state.rng.random() < cfg.penalty_probability)
            if fired:
                reward -= cfg.penalty_magnitude
        step_index = state.step_index + 1
        at_goal = bool(np.linalg.norm(pos - self._goal) <= cfg.goal_radius)
        done = at_goal or step_index >= cfg.max_episode_steps
        return StepResult(EnvState(pos, step_index, state.rng), reward, done, risky, fired, at_goal)


# --- scripted behaviour agents ---------------------------------------------


class BehaviorAgentKind(enum.Enum):
    DIRECT_TO_GOAL = "direct"
    DETOUR_AROUND_RISK = "detour"
    UNIFORM_NOISY = "noisy"


@dataclass(frozen=True)
class BehaviorAgent:
    kind: BehaviorAgentKind
    noise_scale: float = 0.02


# quality labels for guidance: 0 = goal-directed demonstrations, 1 = noise.
# Risk is deliberately not encoded here; risk aversion comes from the critic.
DEFAULT_QUALITY_LABELS = {
    BehaviorAgentKind.DIRECT_TO_GOAL: 0,
    BehaviorAgentKind.DETOUR_AROUND_RISK: 0,
    BehaviorAgentKind.UNIFORM_NOISY: 1,
}


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    # true termination only; a step-limit cutoff sets ``truncated`` instead
    done: bool
    quality_label: int = 0
    in_risky_region: bool = False
    truncated: bool = False


def _toward(pos: np.ndarray, target: np.ndarray, cap: float) -> np.ndarray:
    d = target - pos
    norm = float(np.linalg.norm(d))
    return d if norm <= cap else d * (cap / norm)


def detour_target(pos: np.ndarray, cfg: RiskyPointMassConfig, side: int) -> np.ndarray:
    """Next waypoint on an arc of radius ``risky_radius + detour_margin``.

    ``side`` is +1 to pass above the disk and -1 to pass below.
    """
    center = np.asarray(cfg.risky_center)
    goal = np.asarray(cfg.goal_position)
    radius = cfg.risky_radius + cfg.detour_margin
    if _segment_distance(pos, goal, center) >= cfg.risky_radius + 0.5 * cfg.detour_margin:
        return goal
    rel = pos - center
    dist = float(np.linalg.norm(rel))
    angle = math.atan2(rel[1], rel[0])
    if dist > radius * 1.05:
        # head for the tangent point on the chosen side
        offset = math.acos(min(1.0, radius / dist))
        angle = angle - side * offset
        if side * math.sin(angle) < 0:
            angle = angle + 2 * side * offset
    else:
        angle = angle - side * 0.4
    return center + radius * np.array([math.cos(angle), math.sin(angle)])


def scripted_action(
    agent: BehaviorAgent,
    pos: np.ndarray,
    cfg: RiskyPointMassConfig,
    rng: np.random.Generator,
    side: int = 1,
) -> np.ndarray:
    cap = cfg.max_action_magnitude
    if agent.kind is BehaviorAgentKind.UNIFORM_NOISY:
        return np.clip(agent.noise_scale * rng.uniform(-cap, cap, 2), -cap, cap)
    if agent.kind is BehaviorAgentKind.DIRECT_TO_GOAL:
        nominal = _toward(pos, np.asarray(cfg.goal_position), cap)
    else:
        nominal = _toward(pos, detour_target(pos, cfg, side), cap)
    noise = agent.noise_scale * rng.standard_normal(2) if agent.noise_scale > 0 else 0.0
    return np.clip(nominal + noise, -cap, cap)


def rollout_episode(
    env: RiskyPointMass,
    act: Callable[[np.ndarray], np.ndarray],
    state: EnvState,
) -> list[tuple[Transition, StepResult]]:
    out = []
    while True:
        action = act(state.position)
        res = env.step(state, action)
        cap = env.config.max_action_magnitude
        tr = Transition(
            state.position.copy(),
            np.clip(action, -cap, cap),
            res.reward,
            res.next_state.position.copy(),
            res.reached_goal,
            in_risky_region=res.in_risky_region,
            truncated=res.done and not res.reached_goal,
        )
        out.append((tr, res))
        state = res.next_state
        if res.done:
            return out


def rollout_behavior(
    config: RiskyPointMassConfig,
    agent: BehaviorAgent,
    episodes: int,
    seed: int | np.random.Generator,
    quality_labels: dict[BehaviorAgentKind, int] | None = None,
) -> list[list[Transition]]:
    """Episodes of transitions from a scripted agent; deterministic given ``seed``."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    labels = quality_labels or DEFAULT_QUALITY_LABELS
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    env = RiskyPointMass(config)
    result = []
    for _ in range(episodes):
        ep_rng = np.random.default_rng(rng.integers(2**63))
        side = 1 if ep_rng.random() < 0.5 else -1
        state = env.reset(ep_rng)
        steps = rollout_episode(env, lambda p: scripted_action(agent, p, config, ep_rng, side), state)
        episode = [tr for tr, _ in steps]
        for tr in episode:
            tr.quality_label = labels[agent.kind]
        result.append(episode)
    return result


def allocate_episodes(total: int, ratios: Sequence[float]) -> list[int]:
    """Split ``total`` by ``ratios`` with largest-remainder rounding."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if np.any(ratios < 0) or ratios.sum() <= 0:
        raise ValueError("mixture ratios must be non-negative and not all zero")
    exact = total * ratios / ratios.sum()
    counts = np.floor(exact).astype(int)
    for k in np.argsort(-(exact - counts), kind="stable")[: total - counts.sum()]:
        counts[k] += 1
    return counts.tolist()


def episode_return(episode: Sequence[Transition]) -> float:
    return float(sum(t.reward for t in episode))


# --- tabular oracle ----------------------------------------------------------


@dataclass
class TabularMDP:
    """Finite MDP with discrete reward distributions.

    ``transitions[s, a, s']`` are probabilities, ``reward_values[s, a, k]`` with
    ``reward_probs[s, a, k]`` give the reward law, and ``terminal[s]`` ends the
    episode on arrival.
    """

    transitions: np.ndarray
    reward_values: np.ndarray
    reward_probs: np.ndarray
    gamma: float
    terminal: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.reward_values = np.asarray(self.reward_values, dtype=np.float64)
        self.reward_probs = np.asarray(self.reward_probs, dtype=np.float64)
        n_s, n_a, _ = self.transitions.shape
        if n_s * n_a > 100:
            raise ValueError("tabular oracle limited to |S|*|A| <= 100")
        if not np.allclose(self.transitions.sum(-1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("transition rows must sum to 1")
        if not np.allclose(self.reward_probs.sum(-1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("reward probability rows must sum to 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.terminal is None:
            self.terminal = np.zeros(n_s, dtype=bool)

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]


def _sample_rows(cdf: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(cdf.shape[0])
    return np.minimum((u[:, None] >= cdf).sum(axis=1), cdf.shape[1] - 1)


def chain_mdp_oracle(
    mdp: TabularMDP,
    policy: np.ndarray,
    start_state: int,
    start_action: int | None = None,
    horizon: int | None = None,
    samples: int = 100_000,
    seed: int = 0,
    tol: float = 1e-10,
) -> np.ndarray:
    """Sorted Monte-Carlo samples of the discounted return from ``start_state``.

    ``policy[s]`` is a distribution over actions. ``horizon=None`` truncates
    once ``gamma**t * max|r|`` falls below ``tol``.
    """
    if samples < 10_000:
        raise ValueError("use at least 1e4 samples")
    policy = np.asarray(policy, dtype=np.float64)
    if not np.allclose(policy.sum(-1), 1.0, rtol=0, atol=1e-9):
        raise ValueError("policy rows must sum to 1")
    rng = np.random.default_rng(seed)
    if horizon is None:
        rmax = max(float(np.abs(mdp.reward_values).max()), 1e-300)
        horizon = 1 if mdp.gamma == 0 else int(math.ceil(math.log(tol / rmax) / math.log(mdp.gamma))) + 1
        horizon = max(horizon, 1)
    t_cdf = np.cumsum(mdp.transitions, axis=-1)
    r_cdf = np.cumsum(mdp.reward_probs, axis=-1)
    p_cdf = np.cumsum(policy, axis=-1)
    s = np.full(samples, start_state)
    alive = np.ones(samples, dtype=bool)
    ret = np.zeros(samples)
    disc = 1.0
    for t in range(horizon):
        if t == 0 and start_action is not None:
            a = np.full(samples, start_action)
        else:
            a = _sample_rows(p_cdf[s], rng)
        k = _sample_rows(r_cdf[s, a], rng)
        ret += alive * disc * mdp.reward_values[s, a, k]
        s = _sample_rows(t_cdf[s, a], rng)
        alive &= ~mdp.terminal[s]
        disc *= mdp.gamma
        if not alive.any():
            break
    return np.sort(ret)

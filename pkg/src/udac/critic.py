"""Implicit quantile critic over continuous actions and its quantile-Huber objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Activation, MlpParams, Tensor


def _check_taus(taus: np.ndarray, open_interval: bool = False) -> np.ndarray:
    taus = np.asarray(taus, dtype=np.float64)
    bad = (taus <= 0) | (taus >= 1) if open_interval else (taus < 0) | (taus > 1)
    if np.any(bad) or not np.all(np.isfinite(taus)):
        interval = "(0, 1)" if open_interval else "[0, 1]"
        raise ValueError(f"quantile levels must lie in {interval}")
    return taus


@dataclass
class ImplicitQuantileCritic:
    """F^-1(s, a; tau) = head(embed(s, a) * tau_embed(cos(pi k tau)))."""

    embed: MlpParams
    tau_embed: MlpParams
    head: MlpParams
    n_cos: int = 64

    @classmethod
    def create(
        cls,
        state_dim: int,
        action_dim: int,
        rng: np.random.Generator,
        hidden: int = 64,
        n_cos: int = 64,
    ) -> "ImplicitQuantileCritic":
        return cls(
            embed=ad.init_mlp([state_dim + action_dim, hidden], rng, output_activation=Activation.MISH),
            tau_embed=ad.init_mlp([n_cos, hidden], rng, output_activation=Activation.MISH),
            head=ad.init_mlp([hidden, hidden, hidden, 1], rng),
            n_cos=n_cos,
        )

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            **self.embed.named_parameters(prefix + "embed."),
            **self.tau_embed.named_parameters(prefix + "tau_embed."),
            **self.head.named_parameters(prefix + "head."),
        }

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def frozen(self) -> "ImplicitQuantileCritic":
        return ImplicitQuantileCritic(
            ad.frozen(self.embed), ad.frozen(self.tau_embed), ad.frozen(self.head), self.n_cos
        )

    def copy(self) -> "ImplicitQuantileCritic":
        return ImplicitQuantileCritic(
            ad.copy_mlp(self.embed), ad.copy_mlp(self.tau_embed), ad.copy_mlp(self.head), self.n_cos
        )

    def cosine_features(self, taus: np.ndarray) -> np.ndarray:
        return np.cos(np.pi * np.arange(self.n_cos) * taus[..., None])

    def quantiles(self, states, actions, taus) -> Tensor:
        """Quantile values of shape (B, M) for states/actions (B, d) and taus (B, M) or (M,)."""
        states = ad.as_tensor(states)
        actions = ad.as_tensor(actions)
        taus = _check_taus(taus)
        batch = states.shape[0]
        if taus.ndim == 1:
            taus = np.broadcast_to(taus, (batch, taus.shape[0]))
        m = taus.shape[1]
        feat = self.embed(ad.concat([states, actions], axis=-1))
        hidden = feat.shape[-1]
        tau_feat = self.tau_embed(self.cosine_features(taus).reshape(batch * m, self.n_cos))
        fused = ad.reshape(feat, (batch, 1, hidden)) * ad.reshape(tau_feat, (batch, m, hidden))
        out = self.head(ad.reshape(fused, (batch * m, hidden)))
        return ad.reshape(out, (batch, m))

    def quantile_value(self, state, action, tau: float) -> float:
        """Scalar F^-1(s, a; tau) for a single state/action pair."""
        s = np.asarray(state, dtype=np.float64)[None, :]
        a = np.asarray(action, dtype=np.float64)[None, :]
        return float(self.quantiles(s, a, np.array([[tau]])).data[0, 0])


@dataclass
class CriticPair:
    online: ImplicitQuantileCritic
    target: ImplicitQuantileCritic

    @classmethod
    def create(cls, state_dim: int, action_dim: int, rng: np.random.Generator, **kw) -> "CriticPair":
        online = ImplicitQuantileCritic.create(state_dim, action_dim, rng, **kw)
        return cls(online, online.copy())

    def named_parameters(self, prefix: str = "critic.") -> dict[str, Tensor]:
        return {
            **self.online.named_parameters(prefix + "online."),
            **self.target.named_parameters(prefix + "target."),
        }


@dataclass
class QuantileGrid:
    taus: np.ndarray
    taus_prime: np.ndarray

    def __post_init__(self) -> None:
        self.taus = _check_taus(self.taus, open_interval=True)
        self.taus_prime = _check_taus(self.taus_prime, open_interval=True)

    @classmethod
    def sample(cls, rng: np.random.Generator, n: int, k: int, batch: int | None = None) -> "QuantileGrid":
        """Levels drawn from U(0, 1); per-sample when ``batch`` is given."""
        lead = () if batch is None else (batch,)
        # U[0,1) can return exactly 0
        taus = rng.uniform(np.nextafter(0.0, 1.0), 1.0, lead + (n,))
        taus_prime = rng.uniform(np.nextafter(0.0, 1.0), 1.0, lead + (k,))
        return cls(taus, taus_prime)


def quantile_huber(delta, tau, kappa: float) -> Tensor:
    """Elementwise |1{delta<0} - tau| * (delta^2/(2 kappa) if |delta|<kappa else |delta| - kappa/2)."""
    if kappa <= 0:
        raise ValueError("Huber threshold kappa must be positive")
    delta = ad.as_tensor(delta)
    tau = np.asarray(tau, dtype=np.float64)
    d = delta.data
    weight = np.abs((d < 0).astype(np.float64) - tau)
    small = np.abs(d) < kappa
    base = np.where(small, 0.5 * d * d / kappa, np.abs(d) - 0.5 * kappa)
    slope = np.where(small, d / kappa, np.sign(d))

    def _bw(g):
        return (g * weight * slope,)

    return ad.record_op(weight * base, (delta,), _bw)


def td_error(
    pair: CriticPair,
    state,
    action,
    reward: float,
    next_state,
    next_action,
    done: bool,
    tau: float,
    tau_prime: float,
    gamma: float,
) -> Tensor:
    """delta = r + gamma * F'^-1(s', a'; tau') - F^-1(s, a; tau), target term gradient-stopped."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    s = np.atleast_2d(state)
    a = np.atleast_2d(action)
    z = pair.online.quantiles(s, a, np.array([[tau]]))
    bootstrap = 0.0
    if not done and gamma > 0:
        z_next = pair.target.quantiles(np.atleast_2d(next_state), np.atleast_2d(next_action), np.array([[tau_prime]]))
        bootstrap = gamma * float(z_next.data[0, 0])
    return ad.reshape(ad.sub(reward + bootstrap, z), ())


def distributional_targets(pair: CriticPair, batch, next_actions: np.ndarray, taus_prime: np.ndarray, gamma: float) -> np.ndarray:
    """r + gamma * (1 - done) * F_target^-1(s', a'; tau'_j), shape (B, K), no gradient."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    rewards = np.asarray(batch.rewards, dtype=np.float64)
    live = ~np.asarray(batch.dones, dtype=bool)
    k = taus_prime.shape[-1]
    targets = np.repeat(rewards[:, None], k, axis=1)
    if gamma > 0 and live.any():
        tp = taus_prime if taus_prime.ndim == 1 else taus_prime[live]
        z_next = pair.target.quantiles(batch.next_states[live], next_actions[live], tp).data
        targets[live] += gamma * z_next
    return targets


def pairwise_loss(z: Tensor, targets: np.ndarray, taus: np.ndarray, kappa: float) -> Tensor:
    """Mean over batch and the N x K grid of quantile-Huber terms."""
    batch, n = z.shape
    if taus.ndim == 1:
        taus = np.broadcast_to(taus, (batch, n))
    delta = ad.sub(targets[:, None, :], ad.reshape(z, (batch, n, 1)))
    return ad.tmean(quantile_huber(delta, taus[:, :, None], kappa))


def critic_loss(
    pair: CriticPair,
    batch,
    next_actions: np.ndarray,
    grid: QuantileGrid,
    gamma: float,
    kappa: float,
    actions: np.ndarray | None = None,
) -> Tensor:
    """Batch mean of (1/(N K)) sum_i sum_j L_kappa(delta_ij; tau_i).

    ``actions`` overrides ``batch.actions`` (e.g. already normalised actions).
    """
    if len(batch.rewards) == 0:
        raise ValueError("empty batch")
    targets = distributional_targets(pair, batch, next_actions, grid.taus_prime, gamma)
    a = batch.actions if actions is None else actions
    z = pair.online.quantiles(batch.states, a, grid.taus)
    return pairwise_loss(z, targets, grid.taus, kappa)


W1_GRID = np.arange(1, 100) / 100.0


def empirical_quantiles(samples, taus=W1_GRID) -> np.ndarray:
    return np.quantile(np.asarray(samples, dtype=np.float64), taus, method="inverted_cdf")


def w1_from_quantiles(predicted: np.ndarray, samples) -> float:
    return float(np.mean(np.abs(np.asarray(predicted) - empirical_quantiles(samples))))


def wasserstein1_diagnostic(critic: ImplicitQuantileCritic, state, action, samples) -> float:
    """Mean |F_critic^-1(tau) - F_emp^-1(tau)| over tau = 0.01, ..., 0.99."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < 100:
        raise ValueError("need at least 100 empirical samples")
    s = np.asarray(state, dtype=np.float64)[None, :]
    a = np.asarray(action, dtype=np.float64)[None, :]
    pred = critic.quantiles(s, a, W1_GRID[None, :]).data[0]
    return w1_from_quantiles(pred, samples)

"""Conditional DDPM behaviour policy with classifier guidance on the action latents."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import MlpParams, Tensor, sinusoidal_embedding

BETA_MIN = 0.1
BETA_MAX = 10.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step betas for i = 1..N; index 0 of ``alpha_bars_ext`` is the clean level 1.0."""

    betas: np.ndarray

    def __post_init__(self) -> None:
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("need at least one diffusion step")
        if np.any(betas < 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in [0, 1)")
        object.__setattr__(self, "betas", betas)

    @property
    def n_steps(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def alpha_bars_ext(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bars])

    def _index(self, i) -> np.ndarray:
        i = np.asarray(i)
        if np.any(i < 1) or np.any(i > self.n_steps):
            raise ValueError(f"diffusion step must lie in [1, {self.n_steps}]")
        return i - 1

    def beta(self, i):
        return self.betas[self._index(i)]

    def alpha(self, i):
        return self.alphas[self._index(i)]

    def alpha_bar(self, i):
        return self.alpha_bars[self._index(i)]


def vp_schedule(n_steps: int, beta_min: float = BETA_MIN, beta_max: float = BETA_MAX) -> NoiseSchedule:
    """Discretised variance-preserving SDE:
    beta_i = 1 - exp(-beta_min/N - (beta_max - beta_min) (2i - 1) / (2 N^2)).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    i = np.arange(1, n_steps + 1, dtype=np.float64)
    betas = 1.0 - np.exp(-beta_min / n_steps - (beta_max - beta_min) * (2 * i - 1) / (2 * n_steps**2))
    return NoiseSchedule(betas)


def forward_noise(a0: np.ndarray, i, schedule: NoiseSchedule, eps: np.ndarray) -> np.ndarray:
    """sqrt(abar_i) a0 + sqrt(1 - abar_i) eps; ``i`` scalar or one per row."""
    abar = np.asarray(schedule.alpha_bar(i), dtype=np.float64)
    if abar.ndim == 1:
        abar = abar[:, None]
    return np.sqrt(abar) * a0 + np.sqrt(1.0 - abar) * eps


def _noise_level(i, schedule: NoiseSchedule) -> np.ndarray:
    """alpha_bar for i in [0, N] (0 means clean)."""
    i = np.asarray(i)
    if np.any(i < 0) or np.any(i > schedule.n_steps):
        raise ValueError(f"latent step must lie in [0, {schedule.n_steps}]")
    return schedule.alpha_bars_ext[i]


def _timesteps(i, rows: int) -> np.ndarray:
    i = np.asarray(i)
    return np.full(rows, int(i)) if i.ndim == 0 else i


@dataclass
class EpsilonModel:
    """eps_psi(a^i, s, i): MLP on concat(a^i, s, emb(i))."""

    net: MlpParams
    time_dim: int = 16

    @classmethod
    def create(
        cls, state_dim: int, action_dim: int, rng: np.random.Generator, hidden: int = 256, time_dim: int = 16
    ) -> "EpsilonModel":
        net = ad.init_mlp([action_dim + state_dim + time_dim, hidden, hidden, action_dim], rng)
        return cls(net, time_dim)

    def __call__(self, noisy_actions, states, i) -> Tensor:
        emb = sinusoidal_embedding(_timesteps(i, states.shape[0]), self.time_dim)
        return self.net(ad.concat([noisy_actions, states, emb], axis=-1))

    def named_parameters(self, prefix: str = "diffusion.") -> dict[str, Tensor]:
        return self.net.named_parameters(prefix + "net.")

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()


@dataclass
class GuidanceClassifier:
    """Logits over quality labels from concat(a^i, s, emb(i))."""

    net: MlpParams
    time_dim: int = 16

    @classmethod
    def create(
        cls,
        state_dim: int,
        action_dim: int,
        rng: np.random.Generator,
        hidden: int = 256,
        n_classes: int = 2,
        time_dim: int = 16,
    ) -> "GuidanceClassifier":
        net = ad.init_mlp([action_dim + state_dim + time_dim, hidden, hidden, n_classes], rng)
        return cls(net, time_dim)

    @property
    def n_classes(self) -> int:
        return self.net.out_dim

    def __call__(self, noisy_actions, states, i) -> Tensor:
        emb = sinusoidal_embedding(_timesteps(i, states.shape[0]), self.time_dim)
        return self.net(ad.concat([noisy_actions, states, emb], axis=-1))

    def log_probs(self, noisy_actions, states, i) -> Tensor:
        return ad.log_softmax(self(noisy_actions, states, i), axis=-1)

    def named_parameters(self, prefix: str = "classifier.") -> dict[str, Tensor]:
        return self.net.named_parameters(prefix + "net.")

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()


@dataclass(frozen=True)
class GuidanceConfig:
    enabled: bool = True
    target_class: int = 0
    guidance_scale: float = 0.1
    grad_steps_per_diffusion_step: int = 1

    def __post_init__(self) -> None:
        if not math.isfinite(self.guidance_scale) or self.guidance_scale < 0:
            raise ValueError("guidance_scale must be finite and non-negative")


NO_GUIDANCE = GuidanceConfig(enabled=False)


def diffusion_loss(model: Callable, schedule: NoiseSchedule, states, actions, rng: np.random.Generator) -> Tensor:
    """Batch mean of ||eps - eps_psi(sqrt(abar_i) a + sqrt(1 - abar_i) eps, s, i)||^2, i ~ U{1..N}."""
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape[0] == 0:
        raise ValueError("empty batch")
    i = rng.integers(1, schedule.n_steps + 1, size=actions.shape[0])
    eps = rng.standard_normal(actions.shape)
    noisy = forward_noise(actions, i, schedule, eps)
    pred = model(noisy, np.asarray(states, dtype=np.float64), i)
    return ad.tmean(ad.tsum(ad.square(ad.sub(eps, pred)), axis=-1))


def classifier_loss(
    classifier: GuidanceClassifier,
    schedule: NoiseSchedule,
    states,
    actions,
    labels,
    rng: np.random.Generator,
) -> Tensor:
    """Mean cross-entropy on forward-noised actions at a random step in [0, N]."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty batch")
    if np.any(labels < 0) or np.any(labels >= classifier.n_classes) or np.any(labels != np.round(labels)):
        raise ValueError(f"labels must be integers in [0, {classifier.n_classes})")
    actions = np.asarray(actions, dtype=np.float64)
    i = rng.integers(0, schedule.n_steps + 1, size=actions.shape[0])
    abar = _noise_level(i, schedule)[:, None]
    noisy = np.sqrt(abar) * actions + np.sqrt(1.0 - abar) * rng.standard_normal(actions.shape)
    logp = classifier.log_probs(noisy, np.asarray(states, dtype=np.float64), i)
    return ad.neg(ad.tmean(ad.pick(logp, labels.astype(np.int64))))


def guidance_gradient(classifier: GuidanceClassifier, latents, states, i, target_class: int) -> np.ndarray:
    """Per-row gradient of log p(target_class | a, s, i) with respect to the latent a."""
    a = Tensor(np.asarray(latents, dtype=np.float64), requires_grad=True)
    net = ad.frozen(classifier.net)
    frozen_clf = GuidanceClassifier(net, classifier.time_dim)
    rows = a.shape[0]
    with ad.Tape() as tape:
        logp = frozen_clf.log_probs(a, np.asarray(states, dtype=np.float64), i)
        total = ad.tsum(ad.pick(logp, np.full(rows, target_class)))
    (grad,) = tape.gradient(total, [a])
    return grad


def posterior_mean(eps_hat: np.ndarray, latents: np.ndarray, schedule: NoiseSchedule, i: int) -> np.ndarray:
    """mu = (a^i - beta_i / sqrt(1 - abar_i) * eps_hat) / sqrt(alpha_i)."""
    beta, alpha, abar = schedule.beta(i), schedule.alpha(i), schedule.alpha_bar(i)
    coef = beta / math.sqrt(1.0 - abar) if beta > 0 else 0.0
    return (latents - coef * eps_hat) / math.sqrt(alpha)


def reverse_coefficients(schedule: NoiseSchedule, i: int) -> tuple[float, float, float]:
    """(1/sqrt(alpha_i), beta_i / (sqrt(alpha_i) sqrt(1 - abar_i)), sqrt(beta_i)) of one reverse step.

    The first two reproduce ``posterior_mean`` exactly.
    """
    beta, alpha, abar = schedule.beta(i), schedule.alpha(i), schedule.alpha_bar(i)
    eps_coef = beta / (math.sqrt(alpha) * math.sqrt(1.0 - abar)) if beta > 0 else 0.0
    return 1.0 / math.sqrt(alpha), eps_coef, math.sqrt(beta)


def reverse_sample(
    model: Callable,
    schedule: NoiseSchedule,
    states,
    rng: np.random.Generator,
    guidance: GuidanceConfig = NO_GUIDANCE,
    classifier: GuidanceClassifier | None = None,
    action_dim: int | None = None,
    clip: bool = True,
) -> np.ndarray:
    """Run the reverse chain from a^N ~ N(0, I) to a^0 for every row of ``states``.

    Guidance, when enabled, nudges each post-mean iterate a^{i-1} along the
    classifier's log-probability gradient before fresh noise is added. The
    final step adds no noise.
    """
    states = np.asarray(states, dtype=np.float64)
    if action_dim is None:
        action_dim = model.net.out_dim
    if guidance.enabled and classifier is None:
        raise ValueError("guidance enabled but no classifier given")
    rows = states.shape[0]
    a = rng.standard_normal((rows, action_dim))
    for i in range(schedule.n_steps, 0, -1):
        eps_hat = model(a, states, i).data
        c_a, c_eps, c_noise = reverse_coefficients(schedule, i)
        a = c_a * a - c_eps * eps_hat
        if guidance.enabled and guidance.guidance_scale > 0:
            for _ in range(guidance.grad_steps_per_diffusion_step):
                a = a + guidance.guidance_scale * guidance_gradient(classifier, a, states, i - 1, guidance.target_class)
        if i > 1:
            a = a + c_noise * rng.standard_normal(a.shape)
    return np.clip(a, -1.0, 1.0) if clip else a

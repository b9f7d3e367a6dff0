"""Deterministic perturbation actor pi(s) = lambda * xi(s, beta) + beta and risk distortions."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from . import autodiff as ad
from .autodiff import Activation, MlpParams, Tensor
from .critic import ImplicitQuantileCritic


class DistortionKind(enum.Enum):
    CVAR = "cvar"
    MEAN = "mean"
    WANG = "wang"
    CPW = "cpw"


@dataclass(frozen=True)
class DistortionSpec:
    kind: DistortionKind = DistortionKind.CVAR
    param: float = 0.1

    def __post_init__(self) -> None:
        if self.kind is DistortionKind.CVAR and not 0.0 < self.param <= 1.0:
            raise ValueError("CVaR alpha must lie in (0, 1]")
        if self.kind is DistortionKind.CPW and self.param <= 0:
            raise ValueError("CPW eta must be positive")

    @classmethod
    def parse(cls, text: str) -> "DistortionSpec":
        """``cvar:0.1``, ``mean``, ``wang:-0.75`` or ``cpw:0.71``."""
        name, _, value = text.strip().lower().partition(":")
        kind = DistortionKind(name)
        if kind is DistortionKind.MEAN:
            return cls(kind, 1.0)
        if not value:
            raise ValueError(f"distortion {name!r} needs a parameter, e.g. {name}:0.1")
        return cls(kind, float(value))

    def __str__(self) -> str:
        return "mean" if self.kind is DistortionKind.MEAN else f"{self.kind.value}:{self.param:g}"


CVAR_10 = DistortionSpec(DistortionKind.CVAR, 0.1)
MEAN = DistortionSpec(DistortionKind.MEAN, 1.0)


def _check_open(tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau <= 0) or np.any(tau >= 1):
        raise ValueError("distortion input must lie strictly inside (0, 1)")
    return tau


def wang_distortion_tau(tau, eta: float) -> np.ndarray:
    """Phi(Phi^-1(tau) + eta)."""
    return ndtr(ndtri(_check_open(tau)) + eta)


def cpw_distortion_tau(tau, eta: float) -> np.ndarray:
    """tau^eta / (tau^eta + (1 - tau)^eta)^(1/eta)."""
    tau = _check_open(tau)
    num = tau**eta
    return num / (num + (1.0 - tau) ** eta) ** (1.0 / eta)


def sample_distorted_taus(
    spec: DistortionSpec, shape: tuple[int, int], rng: np.random.Generator, stratified: bool = True
) -> np.ndarray:
    """Quantile levels g(u) whose average quantile estimates the distorted expectation.

    ``u`` is stratified over the rows of the last axis when ``stratified``;
    CVaR uses g(u) = alpha u, Mean g(u) = u.
    """
    rows, n = shape
    if n < 1:
        raise ValueError("n_tau must be >= 1")
    if stratified:
        u = (np.arange(n) + rng.uniform(0.0, 1.0, shape)) / n
    else:
        u = rng.uniform(0.0, 1.0, shape)
    u = np.clip(u, 1e-9, 1.0 - 1e-9)
    if spec.kind is DistortionKind.CVAR:
        return spec.param * u
    if spec.kind is DistortionKind.MEAN:
        return u
    if spec.kind is DistortionKind.WANG:
        return wang_distortion_tau(u, spec.param)
    if spec.kind is DistortionKind.CPW:
        return cpw_distortion_tau(u, spec.param)
    raise ValueError(f"unsupported distortion {spec.kind}")


def distorted_value(
    critic: ImplicitQuantileCritic,
    states,
    actions,
    spec: DistortionSpec,
    n_tau: int,
    rng: np.random.Generator,
    stratified: bool = True,
) -> Tensor:
    """Per-state distorted expectation of the return, shape (B,); differentiable in ``actions``."""
    batch = np.shape(states)[0]
    taus = sample_distorted_taus(spec, (batch, n_tau), rng, stratified)
    return ad.tmean(critic.quantiles(states, actions, taus), axis=1)


@dataclass
class PerturbationModel:
    """xi(s, beta) in [-1, 1]^action_dim via a tanh output layer."""

    net: MlpParams

    @classmethod
    def create(cls, state_dim: int, action_dim: int, rng: np.random.Generator, hidden: int = 256) -> "PerturbationModel":
        net = ad.init_mlp(
            [state_dim + action_dim, hidden, hidden, action_dim], rng, output_activation=Activation.TANH
        )
        return cls(net)

    def __call__(self, states, behavior_actions) -> Tensor:
        return self.net(ad.concat([states, behavior_actions], axis=-1))

    def named_parameters(self, prefix: str = "actor.") -> dict[str, Tensor]:
        return self.net.named_parameters(prefix + "net.")

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def copy(self) -> "PerturbationModel":
        return PerturbationModel(ad.copy_mlp(self.net))

    def frozen(self) -> "PerturbationModel":
        return PerturbationModel(ad.frozen(self.net))


@dataclass
class ActorConfig:
    lam: float = 0.25
    distortion: DistortionSpec = field(default_factory=lambda: CVAR_10)
    n_tau_actor: int = 16
    diffusion_loss_weight: float = 1.0
    stratified_taus: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")


def compose_action(perturbation, behavior_actions, lam: float) -> Tensor:
    """clip(lam * xi + beta, -1, 1)."""
    return ad.clip(ad.add(ad.mul(lam, perturbation), behavior_actions), -1.0, 1.0)


def act(actor: PerturbationModel, states, behavior_actions, lam: float) -> np.ndarray:
    """Actions for given behaviour samples beta (normalised action space)."""
    states = np.asarray(states, dtype=np.float64)
    beta = np.asarray(behavior_actions, dtype=np.float64)
    return compose_action(actor(states, beta), beta, lam).data


def actor_objective(
    actor: PerturbationModel,
    critic: ImplicitQuantileCritic,
    states,
    behavior_actions,
    config: ActorConfig,
    rng: np.random.Generator,
) -> Tensor:
    """-mean_s D[F^-1(s, pi(s); tau)] with the critic frozen."""
    if np.shape(states)[0] == 0:
        raise ValueError("empty batch")
    actions = compose_action(actor(states, behavior_actions), behavior_actions, config.lam)
    values = distorted_value(
        critic.frozen(), states, actions, config.distortion, config.n_tau_actor, rng, config.stratified_taus
    )
    return ad.neg(ad.tmean(values))

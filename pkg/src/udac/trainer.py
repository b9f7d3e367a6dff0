"""Offline training loop: critic, guidance classifier, actor plus diffusion, soft target updates."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .actor import ActorConfig, DistortionSpec, PerturbationModel, actor_objective, compose_action
from .autodiff import AdamState, CheckpointError, ShapeError
from .critic import CriticPair, QuantileGrid, critic_loss
from .dataset import Batch, OfflineDataset, denormalize
from .diffusion import (
    EpsilonModel,
    GuidanceClassifier,
    GuidanceConfig,
    NoiseSchedule,
    classifier_loss,
    diffusion_loss,
    reverse_sample,
    vp_schedule,
)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step", "critic_loss", "actor_loss", "diffusion_loss", "classifier_loss")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(f"{message}; snapshot={snapshot}")
        self.snapshot = snapshot


@dataclass
class TrainerConfig:
    gamma: float = 0.99
    batch_size: int = 256
    gradient_steps: int = 1000
    critic_lr: float = 1e-3
    diffusion_lr: float = 1e-3
    classifier_lr: float = 1e-3
    actor_lr: float = 1e-4
    mu: float = 0.005
    n_quantiles: int = 8
    k_quantiles: int = 8
    huber_kappa: float = 1.0
    diffusion_steps: int = 5
    critic_hidden: int = 64
    diffusion_hidden: int = 256
    classifier_hidden: int = 256
    actor_hidden: int = 256
    n_cos: int = 64
    time_dim: int = 16
    reward_scale: float = 1.0
    grad_clip: float = 10.0
    freeze_taus: bool = False
    target_actor_bootstrap: bool = False
    behavior_pretrain_steps: int = 0
    actor: ActorConfig = field(default_factory=ActorConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0

    def __post_init__(self) -> None:
        for name in ("critic_lr", "diffusion_lr", "classifier_lr", "actor_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.mu <= 1.0:
            raise ValueError("mu must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.gradient_steps < 0 or self.behavior_pretrain_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.n_quantiles < 1 or self.k_quantiles < 1:
            raise ValueError("quantile counts must be >= 1")
        if self.huber_kappa <= 0:
            raise ValueError("huber_kappa must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["actor"]["distortion"] = str(self.actor.distortion)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown trainer config keys: {sorted(unknown)}")
        data = dict(data)
        if "actor" in data:
            actor = dict(data["actor"])
            if isinstance(actor.get("distortion"), str):
                actor["distortion"] = DistortionSpec.parse(actor["distortion"])
            data["actor"] = ActorConfig(**actor)
        if "guidance" in data:
            data["guidance"] = GuidanceConfig(**data["guidance"])
        return cls(**data)


def save_trainer_config(config: TrainerConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def load_trainer_config(path: str | Path) -> TrainerConfig:
    return TrainerConfig.from_dict(json.loads(Path(path).read_text()))


# --- models -----------------------------------------------------------------


@dataclass
class UDACModels:
    critic: CriticPair
    diffusion: EpsilonModel
    classifier: GuidanceClassifier
    actor: PerturbationModel
    actor_target: PerturbationModel
    schedule: NoiseSchedule
    action_low: np.ndarray
    action_high: np.ndarray

    @classmethod
    def create(
        cls, state_dim: int, action_dim: int, config: TrainerConfig, rng: np.random.Generator, action_low, action_high
    ) -> "UDACModels":
        critic = CriticPair.create(state_dim, action_dim, rng, hidden=config.critic_hidden, n_cos=config.n_cos)
        diffusion = EpsilonModel.create(
            state_dim, action_dim, rng, hidden=config.diffusion_hidden, time_dim=config.time_dim
        )
        classifier = GuidanceClassifier.create(
            state_dim, action_dim, rng, hidden=config.classifier_hidden, time_dim=config.time_dim
        )
        actor = PerturbationModel.create(state_dim, action_dim, rng, hidden=config.actor_hidden)
        return cls(
            critic,
            diffusion,
            classifier,
            actor,
            actor.copy(),
            vp_schedule(config.diffusion_steps),
            np.asarray(action_low, dtype=np.float64),
            np.asarray(action_high, dtype=np.float64),
        )

    @property
    def state_dim(self) -> int:
        return self.actor.net.in_dim - self.action_dim

    @property
    def action_dim(self) -> int:
        return self.actor.net.out_dim

    def named_parameters(self) -> dict[str, ad.Tensor]:
        return {
            **self.critic.named_parameters("critic."),
            **self.diffusion.named_parameters("diffusion."),
            **self.classifier.named_parameters("classifier."),
            **self.actor.named_parameters("actor."),
            **self.actor_target.named_parameters("actor_target."),
        }

    def sample_behavior(self, states, rng: np.random.Generator, guidance: GuidanceConfig) -> np.ndarray:
        """beta ~ d_psi(s, .) in normalised action units."""
        return reverse_sample(
            self.diffusion, self.schedule, states, rng, guidance, self.classifier, self.action_dim
        )

    def act_normalized(self, states, rng: np.random.Generator, lam: float, guidance: GuidanceConfig) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        beta = self.sample_behavior(states, rng, guidance)
        return compose_action(self.actor(states, beta), beta, lam).data

    def act(self, states, rng: np.random.Generator, lam: float, guidance: GuidanceConfig) -> np.ndarray:
        """Environment-unit actions for a batch of states."""
        return denormalize(self.act_normalized(states, rng, lam, guidance), self.action_low, self.action_high)


# --- log --------------------------------------------------------------------


@dataclass(frozen=True)
class StepRecord:
    step: int
    critic_loss: float
    actor_loss: float
    diffusion_loss: float
    classifier_loss: float
    critic_grad_norm: float = 0.0
    actor_grad_norm: float = 0.0
    diffusion_grad_norm: float = 0.0
    classifier_grad_norm: float = 0.0


@dataclass
class TrainLog:
    records: list[StepRecord] = field(default_factory=list)
    evaluations: list[tuple[int, object]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: StepRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("log steps must increase")
        self.records.append(record)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path: str | Path) -> None:
        names = [f.name for f in fields(StepRecord)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.records:
                # repr round-trips floats exactly
                w.writerow([repr(getattr(r, n)) for n in names])

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.append(
                    StepRecord(int(row.pop("step")), **{k: float(v) for k, v in row.items()})
                )
        return log

    def bitwise_equal(self, other: "TrainLog") -> bool:
        return len(self) == len(other) and all(
            np.array(list(asdict(a).values())).tobytes() == np.array(list(asdict(b).values())).tobytes()
            for a, b in zip(self.records, other.records)
        )


# --- updates ----------------------------------------------------------------


def _apply(opt: AdamState, params: list[ad.Tensor], grads: list[np.ndarray], max_norm: float) -> float:
    grads, norm = ad.clip_grad_norm(grads, max_norm)
    ad.adam_step(opt, params, grads)
    return norm


def critic_update(
    pair: CriticPair,
    opt: AdamState,
    batch: Batch,
    actions: np.ndarray,
    next_actions: np.ndarray,
    grid: QuantileGrid,
    gamma: float,
    kappa: float,
    max_norm: float,
) -> tuple[float, float]:
    """One Adam step on the online critic; returns (loss, pre-clip grad norm)."""
    params = pair.online.parameters()
    with ad.Tape() as tape:
        loss = critic_loss(pair, batch, next_actions, grid, gamma, kappa, actions=actions)
    grads = tape.gradient(loss, params)
    return float(loss.data), _apply(opt, params, grads, max_norm)


def fit_critic(
    pair: CriticPair,
    dataset: OfflineDataset,
    next_action_fn: Callable[[np.ndarray], np.ndarray],
    steps: int,
    rng: np.random.Generator,
    batch_size: int = 128,
    gamma: float = 0.99,
    kappa: float = 1.0,
    lr: float = 1e-3,
    mu: float = 0.005,
    n_quantiles: int = 8,
    k_quantiles: int = 8,
    max_norm: float = 10.0,
) -> list[float]:
    """Distributional policy evaluation of a fixed policy on ``dataset``; returns per-step losses.

    ``next_action_fn`` maps next states to normalised next actions.
    """
    opt = AdamState.zeros_like(pair.online.parameters(), lr)
    losses = []
    for _ in range(steps):
        batch = dataset.sample_batch(batch_size, rng)
        grid = QuantileGrid.sample(rng, n_quantiles, k_quantiles, batch=batch_size)
        actions = dataset.normalize_actions(batch.actions)
        loss, _ = critic_update(
            pair, opt, batch, actions, next_action_fn(batch.next_states), grid, gamma, kappa, max_norm
        )
        ad.soft_update(pair.target.parameters(), pair.online.parameters(), mu)
        losses.append(loss)
    return losses


class Trainer:
    """Owns models, optimiser states and the training rng; one ``step`` is one iteration."""

    def __init__(
        self,
        dataset: OfflineDataset,
        config: TrainerConfig,
        models: UDACModels | None = None,
        behavior: tuple[EpsilonModel, GuidanceClassifier] | None = None,
    ):
        self.dataset = dataset
        self.config = config
        init_seq, train_seq = np.random.SeedSequence(config.seed).spawn(2)
        self.rng = np.random.default_rng(train_seq)
        if models is None:
            models = UDACModels.create(
                dataset.state_dim, dataset.action_dim, config, np.random.default_rng(init_seq),
                dataset.action_low, dataset.action_high,
            )
        if models.state_dim != dataset.state_dim or models.action_dim != dataset.action_dim:
            raise ShapeError(
                f"models expect state_dim={models.state_dim}, action_dim={models.action_dim}; "
                f"dataset has {dataset.state_dim}, {dataset.action_dim}"
            )
        if behavior is not None:
            diffusion, classifier = behavior
            ad.assign_params(models.diffusion.named_parameters(), {k: v.data for k, v in diffusion.named_parameters().items()})
            ad.assign_params(models.classifier.named_parameters(), {k: v.data for k, v in classifier.named_parameters().items()})
        self.models = models
        self.opt = {
            "critic": AdamState.zeros_like(models.critic.online.parameters(), config.critic_lr),
            "classifier": AdamState.zeros_like(models.classifier.parameters(), config.classifier_lr),
            "actor": AdamState.zeros_like(models.actor.parameters(), config.actor_lr),
            "diffusion": AdamState.zeros_like(models.diffusion.parameters(), config.diffusion_lr),
        }
        self.fixed_grid: QuantileGrid | None = None
        if config.freeze_taus:
            self.fixed_grid = QuantileGrid.sample(self.rng, config.n_quantiles, config.k_quantiles)
        self.step_count = 0
        self.pretrained = config.behavior_pretrain_steps == 0
        self.log = TrainLog()

    # parameter groups for optimiser states, in a fixed order
    def _groups(self) -> dict[str, list[ad.Tensor]]:
        m = self.models
        return {
            "critic": m.critic.online.parameters(),
            "classifier": m.classifier.parameters(),
            "actor": m.actor.parameters(),
            "diffusion": m.diffusion.parameters(),
        }

    def _check(self, record: StepRecord, batch: Batch) -> None:
        values = asdict(record)
        if not all(math.isfinite(v) for v in values.values()):
            raise TrainingDivergedError(
                f"non-finite loss at step {record.step}",
                {**values, "batch_indices": batch.indices[:16].tolist()},
            )

    def behavior_step(self) -> tuple[float, float]:
        """Diffusion and classifier updates only; used for warm starts."""
        cfg, m = self.config, self.models
        batch = self.dataset.sample_batch(cfg.batch_size, self.rng)
        actions = self.dataset.normalize_actions(batch.actions)
        return self._classifier_step(batch, actions)[0], self._diffusion_only_step(batch, actions)

    def _classifier_step(self, batch: Batch, actions: np.ndarray) -> tuple[float, float]:
        m = self.models
        params = m.classifier.parameters()
        with ad.Tape() as tape:
            loss = classifier_loss(m.classifier, m.schedule, batch.states, actions, batch.labels, self.rng)
        norm = _apply(self.opt["classifier"], params, tape.gradient(loss, params), self.config.grad_clip)
        return float(loss.data), norm

    def _diffusion_only_step(self, batch: Batch, actions: np.ndarray) -> float:
        m = self.models
        params = m.diffusion.parameters()
        with ad.Tape() as tape:
            loss = diffusion_loss(m.diffusion, m.schedule, batch.states, actions, self.rng)
        _apply(self.opt["diffusion"], params, tape.gradient(loss, params), self.config.grad_clip)
        return float(loss.data)

    def step(self) -> StepRecord:
        cfg, m, rng = self.config, self.models, self.rng
        batch = self.dataset.sample_batch(cfg.batch_size, rng)
        batch = replace(batch, rewards=batch.rewards * cfg.reward_scale)
        actions = self.dataset.normalize_actions(batch.actions)
        live = ~batch.dones
        n = len(batch)

        # beta for s and beta' for live s' in one reverse chain
        both = np.concatenate([batch.states, batch.next_states[live]], axis=0)
        betas = m.sample_behavior(both, rng, cfg.guidance)
        beta, beta_next = betas[:n], betas[n:]
        next_actions = np.zeros_like(actions)
        if live.any():
            bootstrap_actor = m.actor_target if cfg.target_actor_bootstrap else m.actor
            next_actions[live] = compose_action(
                bootstrap_actor(batch.next_states[live], beta_next), beta_next, cfg.actor.lam
            ).data

        grid = self.fixed_grid or QuantileGrid.sample(rng, cfg.n_quantiles, cfg.k_quantiles, batch=n)
        c_loss, c_norm = critic_update(
            m.critic, self.opt["critic"], batch, actions, next_actions, grid, cfg.gamma, cfg.huber_kappa, cfg.grad_clip
        )

        k_loss, k_norm = self._classifier_step(batch, actions)

        actor_params = m.actor.parameters()
        diff_params = m.diffusion.parameters()
        with ad.Tape() as tape:
            a_loss = actor_objective(m.actor, m.critic.online, batch.states, beta, cfg.actor, rng)
            d_loss = diffusion_loss(m.diffusion, m.schedule, batch.states, actions, rng)
            total = ad.add(a_loss, ad.mul(cfg.actor.diffusion_loss_weight, d_loss))
        grads = tape.gradient(total, actor_params + diff_params)
        a_norm = _apply(self.opt["actor"], actor_params, grads[: len(actor_params)], cfg.grad_clip)
        d_norm = _apply(self.opt["diffusion"], diff_params, grads[len(actor_params) :], cfg.grad_clip)

        ad.soft_update(m.critic.target.parameters(), m.critic.online.parameters(), cfg.mu)
        ad.soft_update(m.actor_target.parameters(), m.actor.parameters(), cfg.mu)

        self.step_count += 1
        record = StepRecord(
            self.step_count,
            c_loss,
            float(a_loss.data),
            float(d_loss.data),
            k_loss,
            c_norm,
            a_norm,
            d_norm,
            k_norm,
        )
        self._check(record, batch)
        self.log.append(record)
        return record

    def run(
        self,
        steps: int | None = None,
        evaluator: Callable[[UDACModels], object] | None = None,
        checkpoint_dir: str | Path | None = None,
    ) -> TrainLog:
        cfg = self.config
        if not self.pretrained:
            for _ in range(cfg.behavior_pretrain_steps):
                self.behavior_step()
            self.pretrained = True
        target = cfg.gradient_steps if steps is None else self.step_count + steps
        while self.step_count < target:
            self.step()
            if evaluator is not None and cfg.eval_every and self.step_count % cfg.eval_every == 0:
                self.log.evaluations.append((self.step_count, evaluator(self.models)))
            if checkpoint_dir is not None and cfg.checkpoint_every and self.step_count % cfg.checkpoint_every == 0:
                self.save(checkpoint_dir)
        return self.log

    # --- persistence -----------------------------------------------------

    def named_state(self) -> dict[str, np.ndarray]:
        named: dict[str, np.ndarray] = {k: v.data for k, v in self.models.named_parameters().items()}
        for group, opt in self.opt.items():
            for i, (m1, m2) in enumerate(zip(opt.first_moment, opt.second_moment)):
                named[f"adam.{group}.m.{i}"] = m1
                named[f"adam.{group}.v.{i}"] = m2
        named["action_low"] = self.models.action_low
        named["action_high"] = self.models.action_high
        named["schedule.betas"] = self.models.schedule.betas
        if self.fixed_grid is not None:
            named["taus.fixed"] = self.fixed_grid.taus
            named["taus_prime.fixed"] = self.fixed_grid.taus_prime
        return named

    def save(self, path: str | Path) -> None:
        out = Path(path)
        out.mkdir(parents=True, exist_ok=True)
        ad.save_params(out / "params.udac", self.named_state())
        state = {
            "version": CHECKPOINT_VERSION,
            "step": self.step_count,
            "pretrained": self.pretrained,
            "rng": self.rng.bit_generator.state,
            "adam_steps": {g: o.step_count for g, o in self.opt.items()},
            "state_dim": self.dataset.state_dim,
            "action_dim": self.dataset.action_dim,
            "config": self.config.to_dict(),
        }
        (out / "trainer_state.json").write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")
        self.log.write_csv(out / "train_log.csv")

    @classmethod
    def restore(cls, path: str | Path, dataset: OfflineDataset) -> "Trainer":
        src = Path(path)
        state = json.loads((src / "trainer_state.json").read_text())
        if state.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported trainer checkpoint version {state.get('version')!r}")
        if (state["state_dim"], state["action_dim"]) != (dataset.state_dim, dataset.action_dim):
            raise ShapeError(
                f"checkpoint dims ({state['state_dim']}, {state['action_dim']}) do not match dataset "
                f"({dataset.state_dim}, {dataset.action_dim})"
            )
        trainer = cls(dataset, TrainerConfig.from_dict(state["config"]))
        values = ad.load_params(src / "params.udac")
        ad.assign_params(trainer.models.named_parameters(), values)
        trainer.models.action_low = values["action_low"].copy()
        trainer.models.action_high = values["action_high"].copy()
        for group, opt in trainer.opt.items():
            opt.first_moment = [values[f"adam.{group}.m.{i}"].copy() for i in range(len(opt.first_moment))]
            opt.second_moment = [values[f"adam.{group}.v.{i}"].copy() for i in range(len(opt.second_moment))]
            opt.step_count = state["adam_steps"][group]
        if trainer.fixed_grid is not None:
            trainer.fixed_grid = QuantileGrid(values["taus.fixed"], values["taus_prime.fixed"])
        trainer.rng.bit_generator.state = state["rng"]
        trainer.step_count = state["step"]
        trainer.pretrained = state["pretrained"]
        trainer.log = TrainLog.read_csv(src / "train_log.csv")
        return trainer


def load_models(path: str | Path) -> tuple[UDACModels, TrainerConfig]:
    """Models and config from a trainer checkpoint directory, without a dataset."""
    src = Path(path)
    state = json.loads((src / "trainer_state.json").read_text())
    if state.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported trainer checkpoint version {state.get('version')!r}")
    config = TrainerConfig.from_dict(state["config"])
    values = ad.load_params(src / "params.udac")
    models = UDACModels.create(
        state["state_dim"], state["action_dim"], config, np.random.default_rng(0),
        values["action_low"], values["action_high"],
    )
    ad.assign_params(models.named_parameters(), values)
    return models, config


@dataclass
class TrainResult:
    models: UDACModels
    log: TrainLog
    trainer: Trainer


def train(
    dataset: OfflineDataset,
    config: TrainerConfig,
    evaluator: Callable[[UDACModels], object] | None = None,
    behavior: tuple[EpsilonModel, GuidanceClassifier] | None = None,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    trainer = Trainer(dataset, config, behavior=behavior)
    trainer.run(evaluator=evaluator, checkpoint_dir=checkpoint_dir)
    return TrainResult(trainer.models, trainer.log, trainer)


def pretrain_behavior(
    dataset: OfflineDataset, config: TrainerConfig, steps: int, batch_size: int | None = None
) -> tuple[EpsilonModel, GuidanceClassifier]:
    """Diffusion model and classifier fitted alone, for sharing across runs that differ only in the actor."""
    overrides = {"behavior_pretrain_steps": 0}
    if batch_size is not None:
        overrides["batch_size"] = batch_size
    trainer = Trainer(dataset, replace(config, **overrides))
    for _ in range(steps):
        trainer.behavior_step()
    return trainer.models.diffusion, trainer.models.classifier

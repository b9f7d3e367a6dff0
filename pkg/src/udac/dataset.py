"""Fixed offline dataset of transitions, minibatch sampling and the UDACDS1 file format."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .envs import (
    BehaviorAgent,
    BehaviorAgentKind,
    RiskyPointMassConfig,
    Transition,
    allocate_episodes,
    rollout_behavior,
)

DATASET_MAGIC = b"UDACDS1"


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


class DimensionMismatchError(DatasetFormatError):
    pass


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    labels: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


@dataclass
class OfflineDataset:
    """Column-major store of transitions.

    Actions are kept in environment units; ``normalize_actions`` maps them to
    [-1, 1] using ``action_low``/``action_high``.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    labels: np.ndarray
    action_low: np.ndarray
    action_high: np.ndarray
    source_manifest: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.rewards)
        if n == 0:
            raise ValueError("dataset must contain at least one transition")
        for name in ("states", "actions", "next_states"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[0] != n:
                raise DimensionMismatchError(f"{name} has shape {arr.shape}, expected ({n}, d)")
        if self.next_states.shape != self.states.shape:
            raise DimensionMismatchError("states and next_states differ in shape")
        if self.action_low.shape != (self.action_dim,) or self.action_high.shape != (self.action_dim,):
            raise DimensionMismatchError("action bounds must have one entry per action dimension")

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def from_transitions(
        cls,
        transitions: Sequence[Transition],
        action_low,
        action_high,
        source_manifest: dict[str, int] | None = None,
    ) -> "OfflineDataset":
        if not transitions:
            raise ValueError("dataset must contain at least one transition")
        return cls(
            states=np.array([t.state for t in transitions], dtype=np.float64),
            actions=np.array([t.action for t in transitions], dtype=np.float64),
            rewards=np.array([t.reward for t in transitions], dtype=np.float64),
            next_states=np.array([t.next_state for t in transitions], dtype=np.float64),
            dones=np.array([t.done for t in transitions], dtype=bool),
            labels=np.array([t.quality_label for t in transitions], dtype=np.int64),
            action_low=np.asarray(action_low, dtype=np.float64),
            action_high=np.asarray(action_high, dtype=np.float64),
            source_manifest=dict(source_manifest or {}),
        )

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform draws with replacement."""
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        idx = rng.integers(0, len(self), size=batch_size)
        return self.take(idx)

    def take(self, idx: np.ndarray) -> Batch:
        return Batch(
            self.states[idx],
            self.actions[idx],
            self.rewards[idx],
            self.next_states[idx],
            self.dones[idx],
            self.labels[idx],
            idx,
        )

    def normalize_actions(self, actions: np.ndarray) -> np.ndarray:
        return normalize(actions, self.action_low, self.action_high)

    def denormalize_actions(self, actions: np.ndarray) -> np.ndarray:
        return denormalize(actions, self.action_low, self.action_high)


def _check_bounds(low: np.ndarray, high: np.ndarray) -> None:
    if np.any(high - low <= 0):
        raise ValueError("action bounds must have positive width")


def normalize(actions, low, high) -> np.ndarray:
    """Affine map of [low, high] onto [-1, 1]."""
    low, high = np.asarray(low, dtype=np.float64), np.asarray(high, dtype=np.float64)
    _check_bounds(low, high)
    return 2.0 * (np.asarray(actions, dtype=np.float64) - low) / (high - low) - 1.0


def denormalize(actions, low, high) -> np.ndarray:
    low, high = np.asarray(low, dtype=np.float64), np.asarray(high, dtype=np.float64)
    _check_bounds(low, high)
    return low + (np.asarray(actions, dtype=np.float64) + 1.0) * 0.5 * (high - low)


# --- file format --------------------------------------------------------------


def record_size(state_dim: int, action_dim: int) -> int:
    # state, action, reward, next_state, done, label
    return 8 * (2 * state_dim + action_dim + 3)


def _metadata(ds: OfflineDataset) -> bytes:
    meta = {
        "action_low": [float(v).hex() for v in ds.action_low],
        "action_high": [float(v).hex() for v in ds.action_high],
        "source_manifest": ds.source_manifest,
    }
    return json.dumps(meta, sort_keys=True).encode("utf-8")


def header_size(ds: OfflineDataset) -> int:
    """Bytes before the first record: magic, dims, count, metadata length and blob."""
    return len(DATASET_MAGIC) + 4 + 4 + 8 + 4 + len(_metadata(ds))


def save_dataset(ds: OfflineDataset, path: str | Path) -> None:
    meta = _metadata(ds)
    head = DATASET_MAGIC + struct.pack("<IIQ", ds.state_dim, ds.action_dim, len(ds))
    head += struct.pack("<I", len(meta)) + meta
    records = np.concatenate(
        [
            ds.states,
            ds.actions,
            ds.rewards[:, None],
            ds.next_states,
            ds.dones.astype(np.float64)[:, None],
            ds.labels.astype(np.float64)[:, None],
        ],
        axis=1,
    )
    payload = np.ascontiguousarray(records, dtype="<f8").tobytes()
    body = head + payload
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(payload)))


def load_dataset(path: str | Path, state_dim: int | None = None, action_dim: int | None = None) -> OfflineDataset:
    blob = Path(path).read_bytes()
    if blob[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise BadMagicError(f"{path}: not a UDACDS1 dataset")
    pos = len(DATASET_MAGIC)
    if len(blob) < pos + 20:
        raise TruncatedFileError(f"{path}: header truncated")
    sdim, adim, count = struct.unpack_from("<IIQ", blob, pos)
    pos += 16
    if (state_dim is not None and sdim != state_dim) or (action_dim is not None and adim != action_dim):
        raise DimensionMismatchError(
            f"{path}: file has state_dim={sdim}, action_dim={adim}; expected {state_dim}, {action_dim}"
        )
    (mlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + mlen:
        raise TruncatedFileError(f"{path}: metadata truncated")
    meta = json.loads(blob[pos : pos + mlen].decode("utf-8"))
    pos += mlen
    rsize = record_size(sdim, adim)
    expected = pos + count * rsize + 4
    if len(blob) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(blob)}")
    if len(blob) > expected:
        raise DimensionMismatchError(f"{path}: {len(blob) - expected} unexpected trailing bytes")
    payload = blob[pos : pos + count * rsize]
    (crc,) = struct.unpack_from("<I", blob, pos + count * rsize)
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{path}: payload CRC mismatch")
    rec = np.frombuffer(payload, dtype="<f8").reshape(count, rsize // 8).astype(np.float64)
    cols = np.cumsum([sdim, adim, 1, sdim, 1])
    s, a, r, s2, d, lab = np.split(rec, cols, axis=1)
    return OfflineDataset(
        states=s.copy(),
        actions=a.copy(),
        rewards=r[:, 0].copy(),
        next_states=s2.copy(),
        dones=d[:, 0] != 0.0,
        labels=lab[:, 0].astype(np.int64),
        action_low=np.array([float.fromhex(v) for v in meta["action_low"]]),
        action_high=np.array([float.fromhex(v) for v in meta["action_high"]]),
        source_manifest=dict(meta["source_manifest"]),
    )


def datasets_equal(a: OfflineDataset, b: OfflineDataset) -> bool:
    """Bitwise equality of every column and of the metadata."""
    arrays = ("states", "actions", "rewards", "next_states", "dones", "labels", "action_low", "action_high")
    return all(
        getattr(a, k).dtype == getattr(b, k).dtype
        and getattr(a, k).shape == getattr(b, k).shape
        and getattr(a, k).tobytes() == getattr(b, k).tobytes()
        for k in arrays
    ) and a.source_manifest == b.source_manifest


# --- generation ---------------------------------------------------------------

MIXTURE_ORDER = (
    BehaviorAgentKind.DIRECT_TO_GOAL,
    BehaviorAgentKind.DETOUR_AROUND_RISK,
    BehaviorAgentKind.UNIFORM_NOISY,
)

DEFAULT_NOISE = {
    BehaviorAgentKind.DIRECT_TO_GOAL: 0.02,
    BehaviorAgentKind.DETOUR_AROUND_RISK: 0.02,
    BehaviorAgentKind.UNIFORM_NOISY: 1.0,
}


def generate_mixture(
    config: RiskyPointMassConfig,
    episodes: int,
    mixture: Sequence[float] = (0.4, 0.4, 0.2),
    seed: int = 0,
    noise: dict[BehaviorAgentKind, float] | None = None,
    explore_anywhere: bool = True,
) -> OfflineDataset:
    """Episodes from the Direct/Detour/Noisy scripted agents in the given proportions.

    With ``explore_anywhere`` the noisy agent's episodes start uniformly over
    the whole arena instead of the start box, so that the data holds varied
    actions along and beyond the demonstrated paths.
    """
    noise = {**DEFAULT_NOISE, **(noise or {})}
    half = config.arena_half_width
    explore_config = replace(config, start_region=(-half, half, -half, half)) if explore_anywhere else config
    counts = allocate_episodes(episodes, mixture)
    rng = np.random.default_rng(seed)
    transitions: list[Transition] = []
    manifest: dict[str, int] = {}
    for kind, n in zip(MIXTURE_ORDER, counts):
        manifest[kind.value] = n
        sub_seed = int(rng.integers(2**63))
        n_transitions = 0
        if n > 0:
            env_config = explore_config if kind is BehaviorAgentKind.UNIFORM_NOISY else config
            for ep in rollout_behavior(env_config, BehaviorAgent(kind, noise[kind]), n, sub_seed):
                transitions.extend(ep)
                n_transitions += len(ep)
        manifest[f"{kind.value}_transitions"] = n_transitions
    cap = config.max_action_magnitude
    return OfflineDataset.from_transitions(transitions, [-cap, -cap], [cap, cap], manifest)

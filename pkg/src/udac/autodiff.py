"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

Operations executed inside an active :class:`Tape` are recorded in creation
order, so the tape is topologically sorted by construction and the backward
sweep is a single reverse pass. Outside a tape every op is plain numpy.

Also hosts the network building blocks shared by every learned component:
MLPs, Mish, sinusoidal timestep embeddings, Adam, soft target updates and the
binary parameter checkpoint format.
"""

from __future__ import annotations

import enum
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64

_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


class Tensor:
    """A float64 array that may participate in gradient recording."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; ops run inside the block are appended in
    execution order. ``gradient`` walks the record backwards once.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Adjoint of a scalar ``loss`` with respect to each tensor in ``sources``.

        Sources that did not participate get a zero array of their shape.
        """
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = adjoints.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = pg
        return [adjoints.get(id(s), np.zeros_like(s.data)) for s in sources]


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    return tape.gradient(loss, params)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        tape.nodes.append(_Node(out, parents, backward_fn))
        return out
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(k for k, n in enumerate(shape) if n == 1 and grad.shape[k] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- elementwise arithmetic -------------------------------------------------


def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    return record_op(
        x.data + y.data,
        (x, y),
        lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
    )


def sub(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    return record_op(
        x.data - y.data,
        (x, y),
        lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
    )


def mul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    return record_op(
        x.data * y.data,
        (x, y),
        lambda g: (_unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)),
    )


def div(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    out = x.data / y.data
    return record_op(
        out,
        (x, y),
        lambda g: (
            _unbroadcast(g / y.data, x.shape),
            _unbroadcast(-g * out / y.data, y.shape),
        ),
    )


def neg(x) -> Tensor:
    x = as_tensor(x)
    return record_op(-x.data, (x,), lambda g: (-g,))


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    return record_op(
        x.data**exponent,
        (x,),
        lambda g: (g * exponent * x.data ** (exponent - 1),),
    )


def square(x) -> Tensor:
    x = as_tensor(x)
    return record_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return record_op(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return record_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return record_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def mish_np(x: np.ndarray) -> np.ndarray:
    return x * np.tanh(softplus_np(x))


def mish(x) -> Tensor:
    """x * tanh(softplus(x))."""
    x = as_tensor(x)
    # tanh(log(1 + n)) = n (n + 2) / (n (n + 2) + 2) with n = e^x; one exp per element
    n = np.exp(np.minimum(x.data, 20.0))
    m = n * (n + 2.0)
    t = m / (m + 2.0)
    out = x.data * t

    def _bw(g):
        sig = n / (1.0 + n)
        return (g * (t + x.data * (1.0 - t * t) * sig),)

    return record_op(out, (x,), _bw)


def clip(x, low: float, high: float) -> Tensor:
    """Clamp; gradient passes only where the input was inside the bounds."""
    x = as_tensor(x)
    inside = (x.data >= low) & (x.data <= high)
    return record_op(np.clip(x.data, low, high), (x,), lambda g: (g * inside,))


# --- reductions and shape ops ----------------------------------------------


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record_op(out, (x,), _bw)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return record_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    out = np.concatenate([x.data for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def _bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return record_op(out, xs, _bw)


def matmul(x, w) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: input last dim {x.shape[-1]} != weight rows {w.shape[0]}")

    def _bw(g):
        gx = g @ w.data.T
        xf = x.data.reshape(-1, x.shape[-1])
        gw = xf.T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return record_op(x.data @ w.data, (x, w), _bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def _bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return record_op(out, (x,), _bw)


def pick(x, index: np.ndarray) -> Tensor:
    """Select ``x[n, index[n]]`` from a 2-D tensor."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def _bw(g):
        full = np.zeros_like(x.data)
        full[rows, index] = g
        return (full,)

    return record_op(x.data[rows, index], (x,), _bw)


# --- networks ---------------------------------------------------------------


class Activation(enum.Enum):
    MISH = "mish"
    RELU = "relu"
    IDENTITY = "identity"
    TANH = "tanh"


_ACTIVATIONS: dict[Activation, Callable[[Tensor], Tensor]] = {
    Activation.MISH: mish,
    Activation.RELU: relu,
    Activation.IDENTITY: lambda x: x,
    Activation.TANH: tanh,
}


@dataclass
class MlpParams:
    """Dense layers ``x @ W + b``; ``activation`` between layers, ``output_activation`` last."""

    weights: list[Tensor]
    biases: list[Tensor]
    activation: Activation = Activation.MISH
    output_activation: Activation = Activation.IDENTITY

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {k}: weight {w.shape} incompatible with bias {b.shape}")
            if k > 0 and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {k}: in_dim {w.shape[0]} != previous out_dim "
                    f"{self.weights[k - 1].shape[1]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        named = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            named[f"{prefix}{k}.weight"] = w
            named[f"{prefix}{k}.bias"] = b
        return named

    def __call__(self, x) -> Tensor:
        return forward_mlp(self, x)


def init_mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    activation: Activation = Activation.MISH,
    output_activation: Activation = Activation.IDENTITY,
) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True))
        biases.append(Tensor(rng.uniform(-bound, bound, (fan_out,)), requires_grad=True))
    return MlpParams(weights, biases, activation, output_activation)


def forward_mlp(params: MlpParams, x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"MLP expects last dim {params.in_dim}, got input of shape {x.shape}")
    act = _ACTIVATIONS[params.activation]
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = matmul(x, w) + b
        x = act(x) if k < last else _ACTIVATIONS[params.output_activation](x)
    return x


def frozen(params: MlpParams) -> MlpParams:
    """View of ``params`` whose tensors share data but record no gradient."""
    return MlpParams(
        [Tensor(w.data) for w in params.weights],
        [Tensor(b.data) for b in params.biases],
        params.activation,
        params.output_activation,
    )


def copy_mlp(params: MlpParams) -> MlpParams:
    return MlpParams(
        [Tensor(w.data.copy(), requires_grad=True) for w in params.weights],
        [Tensor(b.data.copy(), requires_grad=True) for b in params.biases],
        params.activation,
        params.output_activation,
    )


def sinusoidal_embedding(i, dim: int) -> np.ndarray:
    """Interleaved sin/cos features of integer timesteps ``i`` (scalar or 1-D array).

    Frequencies are 10000**(-k/half) for k in [0, half). Step 0 is accepted so
    that clean samples can share the same encoder.
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even number, got {dim}")
    steps = np.asarray(i, dtype=DTYPE)
    if np.any(steps < 0):
        raise ValueError("timesteps must be non-negative")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = steps[..., None] * freqs
    out = np.empty(steps.shape + (dim,), dtype=DTYPE)
    out[..., 0::2] = np.sin(args)
    out[..., 1::2] = np.cos(args)
    return out


# --- optimisation -----------------------------------------------------------


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor], learning_rate: float = 1e-3, **kw) -> "AdamState":
        return cls(
            [np.zeros_like(p.data) for p in params],
            [np.zeros_like(p.data) for p in params],
            learning_rate,
            **kw,
        )


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ShapeError("params, gradients and moments must have equal length")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or m.shape != g.shape:
            raise ShapeError(f"Adam: param {p.shape} vs grad {np.shape(g)} vs moment {m.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return state


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = [g * scale for g in grads]
    return grads, norm


def soft_update(target: Sequence[Tensor], online: Sequence[Tensor], mu: float) -> None:
    """target <- (1 - mu) * target + mu * online, elementwise and in place."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"mu must lie in [0, 1], got {mu}")
    if len(target) != len(online):
        raise ShapeError("target and online parameter lists differ in length")
    for t, o in zip(target, online):
        if t.shape != o.shape:
            raise ShapeError(f"soft_update: {t.shape} vs {o.shape}")
        t.data = (1.0 - mu) * t.data + mu * o.data


# --- checkpoint format ------------------------------------------------------

PARAM_MAGIC = b"UDAC1"


class CheckpointError(ValueError):
    pass


def save_params(path: str | Path, named: Mapping[str, np.ndarray | Tensor]) -> None:
    """Write named arrays: magic, u32 count, records, then CRC32 of everything before."""
    buf = bytearray(PARAM_MAGIC)
    buf += struct.pack("<I", len(named))
    for name, arr in named.items():
        # ascontiguousarray would promote 0-d arrays to 1-d
        a = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", a.ndim)
        buf += struct.pack(f"<{a.ndim}Q", *a.shape)
        buf += a.tobytes()
    buf += struct.pack("<I", zlib.crc32(buf))
    Path(path).write_bytes(bytes(buf))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[: len(PARAM_MAGIC) - 1] == PARAM_MAGIC[:-1] and blob[: len(PARAM_MAGIC)] != PARAM_MAGIC:
        raise CheckpointError(f"unsupported checkpoint version {blob[:len(PARAM_MAGIC)]!r}")
    if blob[: len(PARAM_MAGIC)] != PARAM_MAGIC:
        raise CheckpointError("not a UDAC parameter file (bad magic)")
    if len(blob) < len(PARAM_MAGIC) + 8:
        raise CheckpointError("truncated checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    pos = len(PARAM_MAGIC)
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(dims)
            pos += 8 * n
            out[name] = arr.astype(DTYPE)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return out


def assign_params(named: Mapping[str, Tensor], values: Mapping[str, np.ndarray]) -> None:
    """Copy loaded arrays into live tensors, checking names and shapes."""
    missing = set(named) - set(values)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, t in named.items():
        v = values[name]
        if v.shape != t.shape:
            raise ShapeError(f"{name}: checkpoint shape {v.shape} != model shape {t.shape}")
        t.data = v.copy()

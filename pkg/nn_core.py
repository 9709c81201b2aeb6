"""
Minimal differentiable computation on float64 numpy arrays.

Responsibilities:
- ParamStore: ordered, named parameter arrays with a same-shape gradient shadow and
  seeded uniform(+-1/sqrt(fan_in)) initialization.
- GradientTape: records coarse operations (dense layer, whole LSTM unroll, concat, ...)
  together with hand-derived backward closures. backward_pass replays them in reverse
  and flushes parameter gradients into the store once per pass.
- SGD step, elementwise clipping, central finite-difference checks, checkpoint files.

A tape created with recording=False is the inference path: ops compute values but
nothing is kept, so a frozen store can be read from many threads at once. A recording
tape belongs to the thread that created it.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Literal, Sequence

import numpy as np
from pydantic import BaseModel
from scipy.special import expit

from errors import ConfigurationError, DataError, NumericError, UsageError

logger = logging.getLogger(__name__)

Activation = Literal["tanh", "relu", "identity"]

CHECKPOINT_MAGIC = "DVAE-CKPT v1"
_HEADER_END = b"\nend\n"


# --- Parameters ---

class ParamStore:
    """Named learnable arrays in insertion order, each with a gradient array of the same shape."""

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self._rng = np.random.default_rng(self.rng_seed)
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    @classmethod
    def from_arrays(cls, entries: Sequence[tuple[str, np.ndarray]], rng_seed: int = 0) -> "ParamStore":
        store = cls(rng_seed)
        for name, values in entries:
            if name in store._values:
                raise ConfigurationError(f"duplicate parameter {name!r}")
            arr = np.array(values, dtype=np.float64)
            store._values[name] = arr
            store._grads[name] = np.zeros_like(arr)
        return store

    def add(self, name: str, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        if name in self._values:
            raise ConfigurationError(f"duplicate parameter {name!r}")
        bound = 1.0 / np.sqrt(fan_in)
        values = self._rng.uniform(-bound, bound, size=shape)
        self._values[name] = values
        self._grads[name] = np.zeros_like(values)
        return values

    def add_dense(self, prefix: str, in_dim: int, out_dim: int) -> None:
        self.add(f"{prefix}.weight", (out_dim, in_dim), in_dim)
        self.add(f"{prefix}.bias", (out_dim,), in_dim)

    def add_lstm(self, prefix: str, in_dim: int, hidden: int) -> None:
        # Rows are the input, forget, candidate and output gate blocks; columns are [x, h].
        fan_in = in_dim + hidden
        self.add(f"{prefix}.weight", (4 * hidden, fan_in), fan_in)
        self.add(f"{prefix}.bias", (4 * hidden,), fan_in)

    def __contains__(self, name: object) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def value(self, name: str) -> np.ndarray:
        try:
            return self._values[name]
        except KeyError:
            raise ConfigurationError(f"parameter {name!r} missing from store") from None

    def grad(self, name: str) -> np.ndarray:
        try:
            return self._grads[name]
        except KeyError:
            raise ConfigurationError(f"parameter {name!r} missing from store") from None

    def set(self, name: str, values) -> None:
        current = self.value(name)
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != current.shape:
            raise ConfigurationError(f"{name}: shape {arr.shape} != {current.shape}")
        current[...] = arr

    def has_prefix(self, prefix: str) -> bool:
        return any(n == prefix or n.startswith(prefix + ".") for n in self._values)

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, v.shape) for n, v in self._values.items()]

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    @property
    def num_parameters(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    def census(self) -> dict[str, int]:
        """Parameter counts per layer (name without the trailing .weight/.bias)."""
        out: dict[str, int] = {}
        for name, v in self._values.items():
            block = name.rsplit(".", 1)[0]
            out[block] = out.get(block, 0) + int(v.size)
        return out

    def copy(self) -> "ParamStore":
        return ParamStore.from_arrays([(n, v.copy()) for n, v in self._values.items()], self.rng_seed)


@dataclass(frozen=True)
class LstmState:
    hidden: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, hidden_size: int, batch: int | None = None) -> "LstmState":
        shape = (hidden_size,) if batch is None else (batch, hidden_size)
        return cls(np.zeros(shape), np.zeros(shape))


# --- Tape ---

class Node:
    """A value flowing through the tape; `grad` is filled during backward_pass."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return np.shape(self.value)


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(slots=True)
class _Op:
    name: str
    inputs: tuple[Node, ...]
    output: Node
    backward: BackwardFn


class GradientTape:
    def __init__(self, recording: bool = True):
        self.recording = recording
        self.ops: list[_Op] = []
        self._leaves: dict[tuple[int, str], tuple[ParamStore, str, Node]] = {}
        self._owner = threading.get_ident()

    def __len__(self) -> int:
        return len(self.ops)

    def _check_thread(self) -> None:
        if threading.get_ident() != self._owner:
            raise UsageError("a recording GradientTape may only be used by the thread that created it")

    def param(self, store: ParamStore, name: str) -> Node:
        key = (id(store), name)
        hit = self._leaves.get(key)
        if hit is not None:
            return hit[2]
        node = Node(store.value(name))
        if self.recording:
            self._check_thread()
            self._leaves[key] = (store, name, node)
        return node

    @staticmethod
    def constant(value) -> Node:
        return Node(np.asarray(value, dtype=np.float64))

    def record(self, name: str, inputs: Sequence[Node], value: np.ndarray, backward: BackwardFn) -> Node:
        out = Node(value)
        if self.recording:
            self._check_thread()
            self.ops.append(_Op(name, tuple(inputs), out, backward))
        return out


def backward_pass(tape: GradientTape, loss: Node, loss_grad: float = 1.0) -> None:
    """
    Replay the tape in reverse from `loss` (seeded with loss_grad) and add dLoss/dtheta
    into the owning stores' grads. Store grads accumulate across calls; zero them first
    for a fresh gradient.
    """
    if not tape.recording or not tape.ops:
        raise UsageError("backward_pass called before a forward pass was recorded")
    tape._check_thread()
    for op in tape.ops:
        op.output.grad = None
        for node in op.inputs:
            node.grad = None
    loss.grad = np.full(np.shape(loss.value), float(loss_grad))

    for op in reversed(tape.ops):
        if op.output.grad is None:
            continue
        for node, g in zip(op.inputs, op.backward(op.output.grad)):
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g

    for store, name, node in tape._leaves.values():
        if node.grad is not None:
            store._grads[name] += node.grad


# --- Operations ---

def _activate(a: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(a)
    if activation == "relu":
        return np.maximum(a, 0.0)
    if activation == "identity":
        return a
    raise ConfigurationError(f"unknown activation {activation!r}")


def dense_apply(
    tape: GradientTape,
    store: ParamStore,
    prefix: str,
    x: Node,
    activation: Activation = "identity",
) -> Node:
    """activation(W x + b) for x of shape (in,) or (B, in)."""
    w = tape.param(store, f"{prefix}.weight")
    b = tape.param(store, f"{prefix}.bias")
    xv = x.value
    if xv.shape[-1] != w.value.shape[1]:
        raise ConfigurationError(f"{prefix}: expected input dimension {w.value.shape[1]}, got {xv.shape[-1]}")
    a = xv @ w.value.T + b.value
    y = _activate(a, activation)

    def backward(gy: np.ndarray):
        if activation == "tanh":
            da = gy * (1.0 - y * y)
        elif activation == "relu":
            da = gy * (a > 0)
        else:
            da = gy
        x2 = xv.reshape(-1, xv.shape[-1])
        da2 = da.reshape(-1, da.shape[-1])
        return da @ w.value, da2.T @ x2, da2.sum(axis=0)

    return tape.record(f"dense:{prefix}", (x, w, b), y, backward)


def lstm_run(
    tape: GradientTape,
    store: ParamStore,
    prefix: str,
    sequence: Node,
    initial: LstmState | None = None,
) -> tuple[Node, LstmState]:
    """
    Unroll a single-cell LSTM (no peepholes) over a (T, D) or (B, T, D) sequence.

    Per step, with a = W [x; h] + b split into input/forget/candidate/output blocks:
    c' = sig(f) * c + sig(i) * tanh(g),  h' = sig(o) * tanh(c').
    Returns the hidden sequence (T, H) / (B, T, H) as a tape node and the final state.
    The initial state is treated as a constant.
    """
    w = tape.param(store, f"{prefix}.weight")
    b = tape.param(store, f"{prefix}.bias")
    seq = sequence.value
    unbatched = seq.ndim == 2
    xs = seq[None] if unbatched else seq
    if xs.ndim != 3 or xs.shape[1] < 1:
        raise ConfigurationError(f"{prefix}: sequence must be (T, D) or (B, T, D) with T >= 1, got {seq.shape}")
    n_batch, steps, d = xs.shape
    W = w.value
    hdim = W.shape[0] // 4
    if d + hdim != W.shape[1]:
        raise ConfigurationError(f"{prefix}: expected input dimension {W.shape[1] - hdim}, got {d}")
    if not np.all(np.isfinite(xs)):
        raise DataError(f"{prefix}: non-finite value in input sequence")

    init = initial or LstmState.zeros(hdim)
    Wx, Wh = W[:, :d], W[:, d:]
    h1, h2, h3 = hdim, 2 * hdim, 3 * hdim

    hs = np.empty((steps + 1, n_batch, hdim))
    cs = np.empty((steps + 1, n_batch, hdim))
    tanh_cs = np.empty((steps, n_batch, hdim))
    gates = np.empty((steps, n_batch, 4 * hdim))
    hs[0] = np.broadcast_to(init.hidden, (n_batch, hdim))
    cs[0] = np.broadcast_to(init.cell, (n_batch, hdim))

    xproj = xs @ Wx.T + b.value
    for t in range(steps):
        a = xproj[:, t] + hs[t] @ Wh.T
        gate = gates[t]
        gate[:, :h1] = expit(a[:, :h1])
        gate[:, h1:h2] = expit(a[:, h1:h2])
        gate[:, h2:h3] = np.tanh(a[:, h2:h3])
        gate[:, h3:] = expit(a[:, h3:])
        cs[t + 1] = gate[:, h1:h2] * cs[t] + gate[:, :h1] * gate[:, h2:h3]
        tanh_cs[t] = np.tanh(cs[t + 1])
        hs[t + 1] = gate[:, h3:] * tanh_cs[t]

    outputs = np.ascontiguousarray(np.swapaxes(hs[1:], 0, 1))

    def backward(g_out: np.ndarray):
        g = g_out[None] if unbatched else g_out
        dWx = np.zeros_like(Wx)
        dWh = np.zeros_like(Wh)
        db = np.zeros(4 * hdim)
        dx = np.empty_like(xs)
        dh_next = np.zeros((n_batch, hdim))
        dc_next = np.zeros((n_batch, hdim))
        da = np.empty((n_batch, 4 * hdim))
        for t in reversed(range(steps)):
            gate = gates[t]
            i, f, cand, o = gate[:, :h1], gate[:, h1:h2], gate[:, h2:h3], gate[:, h3:]
            dh = g[:, t] + dh_next
            dc = dh * o * (1.0 - tanh_cs[t] ** 2) + dc_next
            da[:, :h1] = dc * cand * i * (1.0 - i)
            da[:, h1:h2] = dc * cs[t] * f * (1.0 - f)
            da[:, h2:h3] = dc * i * (1.0 - cand * cand)
            da[:, h3:] = dh * tanh_cs[t] * o * (1.0 - o)
            dWx += da.T @ xs[:, t]
            dWh += da.T @ hs[t]
            db += da.sum(axis=0)
            dx[:, t] = da @ Wx
            dh_next = da @ Wh
            dc_next = dc * f
        return (dx[0] if unbatched else dx), np.concatenate([dWx, dWh], axis=1), db

    out = tape.record(f"lstm:{prefix}", (sequence, w, b), outputs[0] if unbatched else outputs, backward)
    final = LstmState(
        hidden=hs[steps][0] if unbatched else hs[steps],
        cell=cs[steps][0] if unbatched else cs[steps],
    )
    return out, final


def concat(tape: GradientTape, nodes: Sequence[Node], axis: int = -1) -> Node:
    values = [n.value for n in nodes]
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray):
        return np.split(g, splits, axis=axis)

    return tape.record("concat", nodes, np.concatenate(values, axis=axis), backward)


def stack(tape: GradientTape, nodes: Sequence[Node], axis: int = -1) -> Node:
    value = np.stack([n.value for n in nodes], axis=axis)

    def backward(g: np.ndarray):
        return [np.take(g, k, axis=axis) for k in range(len(nodes))]

    return tape.record("stack", nodes, value, backward)


def reshape(tape: GradientTape, node: Node, shape: tuple[int, ...]) -> Node:
    original = node.value.shape

    def backward(g: np.ndarray):
        return (g.reshape(original),)

    return tape.record("reshape", (node,), node.value.reshape(shape), backward)


def scale(tape: GradientTape, node: Node, factor) -> Node:
    """Elementwise product with a constant broadcast over the trailing axis."""
    factor = np.asarray(factor, dtype=np.float64)

    def backward(g: np.ndarray):
        return (g * factor,)

    return tape.record("scale", (node,), node.value * factor, backward)


def last_step(tape: GradientTape, node: Node) -> Node:
    """Select the final time step of a (..., T, H) sequence."""
    value = node.value

    def backward(g: np.ndarray):
        full = np.zeros_like(value)
        full[..., -1, :] = g
        return (full,)

    return tape.record("last_step", (node,), value[..., -1, :].copy(), backward)


def repeat_steps(tape: GradientTape, node: Node, steps: int) -> Node:
    """Turn a (B, D) vector into a (B, steps, D) constant-input sequence."""
    value = np.repeat(node.value[..., None, :], steps, axis=-2)

    def backward(g: np.ndarray):
        return (g.sum(axis=-2),)

    return tape.record("repeat_steps", (node,), value, backward)


# --- Optimization ---

def check_gradients(store: ParamStore) -> None:
    """Raise NumericError naming the first entry whose gradient holds inf or NaN."""
    for name in store:
        if not np.all(np.isfinite(store._grads[name])):
            raise NumericError(f"non-finite gradient in parameter {name!r}")


def clip_gradients(store: ParamStore, limit: float) -> None:
    """Clip every gradient element to [-limit, limit] in place. Non-finite gradients are rejected, not clipped."""
    check_gradients(store)
    for name in store:
        np.clip(store._grads[name], -limit, limit, out=store._grads[name])


def sgd_step(store: ParamStore, lr: float) -> None:
    """theta <- theta - lr * g for every entry. Gradients are left for the caller to zero."""
    check_gradients(store)
    for name in store:
        store._values[name] -= lr * store._grads[name]


# --- Gradient checking ---

class GradCheckReport(BaseModel):
    tolerance: float
    step: float
    # Worst |analytic - numeric| / max(1, |numeric|) per parameter entry.
    blocks: dict[str, float] = {}

    @property
    def worst(self) -> float:
        return max(self.blocks.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


LossFn = Callable[[ParamStore, GradientTape], Node]


def grad_check(
    loss_fn: LossFn,
    store: ParamStore,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_checks_per_block: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare tape gradients of a scalar loss against central differences.

    `loss_fn(store, tape)` must be deterministic (fixed eps) and return the loss node.
    With max_checks_per_block set, that many elements per entry are sampled.
    """
    if len(store) == 0:
        return GradCheckReport(tolerance=tolerance, step=step)

    store.zero_grad()
    tape = GradientTape()
    loss = loss_fn(store, tape)
    backward_pass(tape, loss)
    analytic = {name: store.grad(name).copy() for name in store}
    store.zero_grad()

    def evaluate() -> float:
        return float(np.sum(loss_fn(store, GradientTape(recording=False)).value))

    rng = np.random.default_rng(seed)
    blocks: dict[str, float] = {}
    for name in store.names():
        values = store.value(name)
        picks = np.arange(values.size)
        if max_checks_per_block is not None and values.size > max_checks_per_block:
            picks = np.sort(rng.choice(values.size, size=max_checks_per_block, replace=False))
        worst = 0.0
        for k in picks:
            idx = np.unravel_index(int(k), values.shape)
            orig = values[idx]
            values[idx] = orig + step
            up = evaluate()
            values[idx] = orig - step
            down = evaluate()
            values[idx] = orig
            numeric = (up - down) / (2.0 * step)
            worst = max(worst, abs(analytic[name][idx] - numeric) / max(1.0, abs(numeric)))
        blocks[name] = worst
    report = GradCheckReport(tolerance=tolerance, step=step, blocks=blocks)
    logger.debug("Gradient check worst relative error %.3e over %d entries", report.worst, len(blocks))
    return report


# --- Checkpoints ---

def save_checkpoint(store: ParamStore, path: str | Path, kind: str) -> None:
    """Text header (version, kind, seed, names and shapes) then little-endian float64 payload."""
    lines = [CHECKPOINT_MAGIC, f"kind={kind}", f"seed={store.rng_seed}", f"entries={len(store)}"]
    for name, shape in store.shapes():
        lines.append(f"{name} {','.join(str(d) for d in shape)}")
    header = ("\n".join(lines)).encode("utf-8") + _HEADER_END
    payload = b"".join(np.ascontiguousarray(store.value(n), dtype="<f8").tobytes() for n in store)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + payload)


def load_checkpoint(path: str | Path) -> tuple[str, ParamStore]:
    raw = Path(path).read_bytes()
    cut = raw.find(_HEADER_END)
    if cut < 0:
        raise DataError(f"{path}: checkpoint header not terminated")
    lines = raw[:cut].decode("utf-8").split("\n")
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    try:
        meta = dict(line.split("=", 1) for line in lines[1:4])
        kind, seed, count = meta["kind"], int(meta["seed"]), int(meta["entries"])
        specs = []
        for line in lines[4 : 4 + count]:
            name, _, dims = line.partition(" ")
            specs.append((name, tuple(int(d) for d in dims.split(",") if d)))
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: malformed checkpoint header ({e})") from e
    if len(specs) != count or len(lines) != 4 + count:
        raise DataError(f"{path}: header lists {len(specs)} entries, expected {count}")

    offset = cut + len(_HEADER_END)
    entries = []
    for name, shape in specs:
        size = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * size > len(raw):
            raise DataError(f"{path}: payload truncated at {name!r}")
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shape)
        entries.append((name, arr.astype(np.float64)))
        offset += 8 * size
    if offset != len(raw):
        raise DataError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return kind, ParamStore.from_arrays(entries, rng_seed=seed)

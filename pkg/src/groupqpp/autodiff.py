"""Dense 2-D reverse-mode automatic differentiation and Adam.

Everything is float64 and every tensor is a 2-D row-major matrix;
scalars travel as 1x1 tensors.  Operations are methods on a Tape, which
records one backward closure per op and replays them in reverse.  A tape
built with record=False skips recording for cheap re-evaluation
(finite differences, inference).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, ShapeError

CHECKPOINT_MAGIC = b"QPPM"
CHECKPOINT_VERSION = 1


class Tensor:
    """A matrix with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(
                f"tensors are 2-D; got shape {arr.shape}"
            )
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(
                f"item() requires a scalar, got shape {self.data.shape}"
            )
        return float(self.data[0, 0])

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g


class Tape:
    """Recorded op sequence; one backward pass per forward pass."""

    def __init__(self, record: bool = True):
        self.record = record
        self._closures: list = []
        self._spent = False

    def _emit(self, out: Tensor, inputs, closure) -> Tensor:
        if self.record and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            self._closures.append((out, closure))
        return out

    def backward(self, loss: Tensor):
        if not self.record:
            raise ContractError("backward on a non-recording tape")
        if self._spent:
            raise ContractError(
                "tape already consumed: one backward pass per forward pass"
            )
        if loss.data.shape != (1, 1):
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        self._spent = True
        loss._accumulate(np.ones((1, 1)))
        for out, closure in reversed(self._closures):
            if out.grad is not None:
                closure(out.grad)

    # ---- primitives ----

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        out = Tensor(a.data @ b.data)

        def closure(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return self._emit(out, (a, b), closure)

    @staticmethod
    def _addable(a: Tensor, b: Tensor) -> bool:
        return a.shape == b.shape or (
            b.shape == (1, a.shape[1])
        )

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """a + b; b may be a single row broadcast over a's rows."""
        if not self._addable(a, b):
            raise ShapeError(f"add: {a.shape} + {b.shape}")
        out = Tensor(a.data + b.data)

        def closure(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(
                    g if b.shape == a.shape else g.sum(axis=0, keepdims=True)
                )

        return self._emit(out, (a, b), closure)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if not self._addable(a, b):
            raise ShapeError(f"sub: {a.shape} - {b.shape}")
        out = Tensor(a.data - b.data)

        def closure(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(
                    -g if b.shape == a.shape else -g.sum(axis=0, keepdims=True)
                )

        return self._emit(out, (a, b), closure)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        """a * b elementwise; b may be a single row broadcast over a's rows."""
        if not self._addable(a, b):
            raise ShapeError(f"mul: {a.shape} * {b.shape}")
        out = Tensor(a.data * b.data)

        def closure(g):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                gb = g * a.data
                b._accumulate(
                    gb if b.shape == a.shape else gb.sum(axis=0, keepdims=True)
                )

        return self._emit(out, (a, b), closure)

    def scale(self, a: Tensor, c: float) -> Tensor:
        out = Tensor(a.data * c)

        def closure(g):
            if a.requires_grad:
                a._accumulate(g * c)

        return self._emit(out, (a,), closure)

    def transpose(self, a: Tensor) -> Tensor:
        out = Tensor(a.data.T)

        def closure(g):
            if a.requires_grad:
                a._accumulate(g.T)

        return self._emit(out, (a,), closure)

    def row_softmax(self, a: Tensor) -> Tensor:
        shifted = a.data - a.data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=1, keepdims=True)
        out = Tensor(y)

        def closure(g):
            if a.requires_grad:
                inner = (g * y).sum(axis=1, keepdims=True)
                a._accumulate(y * (g - inner))

        return self._emit(out, (a,), closure)

    def layer_norm(self, a: Tensor, eps: float = 1e-5) -> Tensor:
        """Normalize each row to zero mean, unit variance (no gain/bias)."""
        mu = a.data.mean(axis=1, keepdims=True)
        var = a.data.var(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        y = (a.data - mu) * inv
        out = Tensor(y)

        def closure(g):
            if a.requires_grad:
                g_mean = g.mean(axis=1, keepdims=True)
                gy_mean = (g * y).mean(axis=1, keepdims=True)
                a._accumulate(inv * (g - g_mean - y * gy_mean))

        return self._emit(out, (a,), closure)

    def gelu(self, a: Tensor) -> Tensor:
        """Gaussian error linear unit, tanh approximation."""
        c = math.sqrt(2.0 / math.pi)
        x = a.data
        u = c * (x + 0.044715 * x**3)
        th = np.tanh(u)
        out = Tensor(0.5 * x * (1.0 + th))

        def closure(g):
            if a.requires_grad:
                du = c * (1.0 + 3.0 * 0.044715 * x**2)
                deriv = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du
                a._accumulate(g * deriv)

        return self._emit(out, (a,), closure)

    def mean_all(self, a: Tensor) -> Tensor:
        out = Tensor(np.array([[a.data.mean()]]))

        def closure(g):
            if a.requires_grad:
                a._accumulate(np.full_like(a.data, g[0, 0] / a.data.size))

        return self._emit(out, (a,), closure)

    def sum_all(self, a: Tensor) -> Tensor:
        out = Tensor(np.array([[a.data.sum()]]))

        def closure(g):
            if a.requires_grad:
                a._accumulate(np.full_like(a.data, g[0, 0]))

        return self._emit(out, (a,), closure)

    def mean_rows(self, a: Tensor) -> Tensor:
        """Column means as a single row: (n, m) -> (1, m)."""
        out = Tensor(a.data.mean(axis=0, keepdims=True))

        def closure(g):
            if a.requires_grad:
                a._accumulate(np.repeat(g / a.shape[0], a.shape[0], axis=0))

        return self._emit(out, (a,), closure)

    def concat(self, tensors, axis: int = 1) -> Tensor:
        tensors = list(tensors)
        if not tensors:
            raise ContractError("concat of zero tensors")
        if axis not in (0, 1):
            raise ContractError(f"concat axis must be 0 or 1, got {axis}")
        other = 1 - axis
        base = tensors[0].shape[other]
        for t in tensors[1:]:
            if t.shape[other] != base:
                raise ShapeError(
                    f"concat axis {axis}: {tensors[0].shape} vs {t.shape}"
                )
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
        offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

        def closure(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    piece = g[lo:hi, :] if axis == 0 else g[:, lo:hi]
                    t._accumulate(piece)

        return self._emit(out, tuple(tensors), closure)

    def slice_rows(self, a: Tensor, i0: int, i1: int) -> Tensor:
        if not 0 <= i0 < i1 <= a.shape[0]:
            raise ShapeError(
                f"slice_rows [{i0}:{i1}] of {a.shape}"
            )
        out = Tensor(a.data[i0:i1, :])

        def closure(g):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full[i0:i1, :] = g
                a._accumulate(full)

        return self._emit(out, (a,), closure)

    def slice_cols(self, a: Tensor, j0: int, j1: int) -> Tensor:
        if not 0 <= j0 < j1 <= a.shape[1]:
            raise ShapeError(
                f"slice_cols [{j0}:{j1}] of {a.shape}"
            )
        out = Tensor(a.data[:, j0:j1])

        def closure(g):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full[:, j0:j1] = g
                a._accumulate(full)

        return self._emit(out, (a,), closure)

    def gather_rows(self, a: Tensor, indices) -> Tensor:
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
            raise ShapeError(
                f"gather_rows indices outside 0..{a.shape[0] - 1}"
            )
        out = Tensor(a.data[idx, :])

        def closure(g):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                np.add.at(full, idx, g)
                a._accumulate(full)

        return self._emit(out, (a,), closure)


def grad_check(f, params, h: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences.

    ``f(tape)`` must rebuild the forward pass from the live values of
    ``params`` and return a scalar tensor.  Relative error per coordinate
    is |analytic - difference| / max(1e-12, |analytic| + |difference|).
    """
    if h <= 0:
        raise ContractError(f"h must be positive, got {h}")
    for p in params:
        p.grad = None
    tape = Tape()
    loss = f(tape)
    tape.backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        for p in params
    ]
    worst = 0.0
    for p, ag in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ag.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(Tape(record=False)).item()
            flat[i] = orig - h
            down = f(Tape(record=False)).item()
            flat[i] = orig
            diff = (up - down) / (2.0 * h)
            err = abs(aflat[i] - diff) / max(1e-12, abs(aflat[i]) + abs(diff))
            worst = max(worst, err)
    return worst


def warmup_linear_lr(base_lr: float, t: int, total: int, warmup: int) -> float:
    """Linear ramp to base_lr over ``warmup`` steps, then linear decay to 0."""
    if not 1 <= t <= total:
        raise ContractError(f"step {t} outside schedule 1..{total}")
    if t <= warmup:
        return base_lr * t / warmup
    if total == warmup:
        return base_lr
    return base_lr * (total - t) / (total - warmup)


@dataclass
class AdamState:
    """Bias-corrected Adam with the warmup-then-linear-decay schedule."""

    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    _m: list = field(default_factory=list)
    _v: list = field(default_factory=list)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ContractError(
                f"total_steps must be >= 1, got {self.total_steps}"
            )
        if self.warmup_steps == 0:
            self.warmup_steps = math.ceil(0.10 * self.total_steps)

    def lr_at(self, t: int) -> float:
        return warmup_linear_lr(
            self.base_lr, t, self.total_steps, self.warmup_steps
        )


def adam_step(state: AdamState, params, grads=None) -> None:
    """One in-place update; grads default to each param's accumulator."""
    params = list(params)
    if grads is None:
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data)
            for p in params
        ]
    if state.t >= state.total_steps:
        raise ContractError(
            f"optimizer schedule exhausted at t={state.t}"
        )
    if not state._m:
        state._m = [np.zeros_like(p.data) for p in params]
        state._v = [np.zeros_like(p.data) for p in params]
    if len(state._m) != len(params):
        raise ContractError(
            f"optimizer tracks {len(state._m)} params, got {len(params)}"
        )
    state.t += 1
    lr = state.lr_at(state.t)
    b1t = 1.0 - state.beta1**state.t
    b2t = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state._m, state._v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / b1t) / (np.sqrt(v / b2t) + state.eps)


def save_checkpoint(named_params: dict[str, Tensor], path) -> None:
    """Write parameters sorted by name: QPPM magic, version, records of
    (name, rank, dims, float64-LE data)."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(named_params):
            data = named_params[name].data
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(np.asarray(data, dtype="<f8").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Inverse of `save_checkpoint`; returns name -> float64 array."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise FormatError("missing checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError("truncated record header")
            (nlen,) = struct.unpack("<I", head)
            name = _read_exact(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            dims = struct.unpack(
                f"<{rank}I", _read_exact(f, 4 * rank, "dims")
            )
            count = int(np.prod(dims)) if dims else 1
            raw = _read_exact(f, 8 * count, f"data of {name}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    return out

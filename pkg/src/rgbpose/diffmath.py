"""Small reverse-mode autodiff over numpy float64 arrays.

Ops are recorded on the active :class:`Tape` only when a tape is open and at
least one input requires a gradient, so inference code paths run plain numpy.

    with Tape() as tape:
        loss = mse(mlp_forward(x, layers), y)
    backward(loss)
"""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, UsageError

DTYPE = np.float64
LEAKY_SLOPE = 0.01

_DEBUG = False
_TAPE_STACK: list["Tape"] = []


def set_debug(flag: bool) -> None:
    """Enable finiteness checks after every forward op."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed ops for one backward pass."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable) -> None:
        out._tape = self
        self.nodes.append((out, inputs, fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise UsageError("loss does not depend on any tensor requiring grad")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, fn in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(g, dtype=DTYPE, copy=True)
                else:
                    inp.grad = inp.grad + g

    def free(self) -> None:
        for out, _, _ in self.nodes:
            out._tape = None
        self.nodes.clear()


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise UsageError(f"backward needs a scalar loss, got {shape}")
    if loss._tape is None:
        raise UsageError("loss was not produced on an active tape")
    loss._tape.backward(loss)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable, opname: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(i.data)) for i in inputs):
            raise FloatingPointError(f"{opname} produced non-finite output from finite inputs")
    tape = active_tape()
    needs = tape is not None and any(i.requires_grad for i in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as err:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from err
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as err:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from err
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as err:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from err
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    factor = np.where(pos, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def abs_(x: Tensor) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero where clipping is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


# -- linear algebra / shape ------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T if a.requires_grad else None,
                            a.data.T @ g if b.requires_grad else None), "matmul")


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got {x.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def concat_cols(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    na = a.shape[1]
    return _make(np.concatenate([a.data, b.data], axis=1), (a, b),
                 lambda g: (g[:, :na], g[:, na:]), "concat_cols")


def concat_rows(*parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts or any(p.data.ndim != 2 or p.shape[1] != parts[0].shape[1] for p in parts):
        raise DimensionError(f"concat_rows: column counts differ, {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts),
                 lambda g: tuple(g[a:b] for a, b in zip(bounds[:-1], bounds[1:])), "concat_rows")


def broadcast_rows(x, n: int) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] != 1:
        raise DimensionError(f"broadcast_rows needs a [1 x d] row, got {x.shape}")
    if n < 1:
        raise DimensionError(f"broadcast_rows: row count must be positive, got {n}")
    return _make(np.repeat(x.data, n, axis=0), (x,),
                 lambda g: (g.sum(axis=0, keepdims=True),), "broadcast_rows")


def take_rows(x, idx) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def fn(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), fn, "take_rows")


# -- reductions ------------------------------------------------------------------

def sum_(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,),
                 lambda g: (np.full(shape, float(g), dtype=DTYPE),), "sum")


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.data.size
    return _make(np.array(x.data.mean()), (x,),
                 lambda g: (np.full(shape, float(g) / n, dtype=DTYPE),), "mean")


def avgpool_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise DimensionError(f"avgpool_rows needs a non-empty matrix, got {x.shape}")
    n = x.shape[0]
    return _make(x.data.mean(axis=0, keepdims=True), (x,),
                 lambda g: (np.repeat(g / n, n, axis=0),), "avgpool_rows")


def maxpool_rows(x) -> Tensor:
    """Columnwise max; ties route the gradient to the first maximal row."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise DimensionError(f"maxpool_rows needs a non-empty matrix, got {x.shape}")
    arg = x.data.argmax(axis=0)
    cols = np.arange(x.shape[1])
    shape = x.shape

    def fn(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[arg, cols] = g[0]
        return (out,)

    return _make(x.data[arg, cols][None, :], (x,), fn, "maxpool_rows")


# -- softmax family ------------------------------------------------------------------

def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs a matrix, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (x,), fn, "softmax_rows")


def mean_row_entropy(logits) -> Tensor:
    """Mean Shannon entropy of softmax rows, computed from logits (no log(0))."""
    x = as_tensor(logits)
    z = x.data - x.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1, keepdims=True)
    n = x.shape[0]

    def fn(g):
        return (-(float(g) / n) * p * (logp + h),)

    return _make(np.array(h.mean()), (x,), fn, "mean_row_entropy")


# -- losses ------------------------------------------------------------------------

def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mse")
    diff = a.data - b.data
    n = diff.size

    def fn(g):
        ga = (2.0 * float(g) / n) * diff
        return (ga, -ga)

    return _make(np.array((diff * diff).mean()), (a, b), fn, "mse")


def smooth_l1(a, b, beta: float = 1.0) -> Tensor:
    if not beta > 0:
        raise ConfigError(f"smooth_l1: beta must be positive, got {beta}")
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "smooth_l1")
    e = a.data - b.data
    ae = np.abs(e)
    small = ae < beta
    val = np.where(small, 0.5 * e * e / beta, ae - 0.5 * beta)
    n = e.size

    def fn(g):
        ga = (float(g) / n) * np.where(small, e / beta, np.sign(e))
        return (ga, -ga)

    return _make(np.array(val.mean()), (a, b), fn, "smooth_l1")


# -- layers -----------------------------------------------------------------------

Layer = tuple[Tensor, Tensor]


def check_mlp_chain(layers: Sequence[Layer], d_in: int | None = None) -> None:
    if not layers:
        raise ConfigError("MLP needs at least one layer")
    prev = d_in
    for i, (w, b) in enumerate(layers):
        if w.data.ndim != 2 or b.shape != (1, w.shape[1]):
            raise ConfigError(f"layer {i}: weight {w.shape} and bias {b.shape} do not agree")
        if prev is not None and w.shape[0] != prev:
            raise ConfigError(f"layer {i}: expects width {w.shape[0]}, previous layer gives {prev}")
        prev = w.shape[1]


def mlp_forward(x, layers: Sequence[Layer], slope: float = LEAKY_SLOPE) -> Tensor:
    """Affine maps with leaky-ReLU between them; the last layer stays linear."""
    h = as_tensor(x)
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = add(matmul(h, w), b)
        if i < last:
            h = leaky_relu(h, slope)
    return h


class Params:
    """Named parameter tensors with a frozen flag.

    Frozen tensors never require grad, so the optimizer and the tape both skip
    them.
    """

    def __init__(self):
        self.tensors: OrderedDict[str, Tensor] = OrderedDict()
        self.frozen: set[str] = set()

    def add(self, name: str, value: np.ndarray, frozen: bool = False) -> Tensor:
        if name in self.tensors:
            raise ConfigError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=not frozen, name=name)
        self.tensors[name] = t
        if frozen:
            self.frozen.add(name)
        return t

    def add_mlp(self, prefix: str, widths: Sequence[int], rng: np.random.Generator,
                frozen: bool = False, zero_last: bool = False) -> list[Layer]:
        if len(widths) < 2 or any(int(w) < 1 for w in widths):
            raise ConfigError(f"{prefix}: MLP widths must be >= 1 and at least two, got {list(widths)}")
        layers = []
        n = len(widths) - 1
        for i in range(n):
            fan_in, fan_out = int(widths[i]), int(widths[i + 1])
            if zero_last and i == n - 1:
                w = np.zeros((fan_in, fan_out))
            else:
                # He-style init; leaky slope is small enough to ignore
                w = rng.normal(0.0, math.sqrt(2.0 / fan_in) if i < n - 1 else math.sqrt(1.0 / fan_in),
                               size=(fan_in, fan_out))
            layers.append((self.add(f"{prefix}.{i}.w", w, frozen),
                           self.add(f"{prefix}.{i}.b", np.zeros((1, fan_out)), frozen)))
        check_mlp_chain(layers, int(widths[0]))
        return layers

    def mlp(self, prefix: str) -> list[Layer]:
        layers = []
        i = 0
        while f"{prefix}.{i}.w" in self.tensors:
            layers.append((self.tensors[f"{prefix}.{i}.w"], self.tensors[f"{prefix}.{i}.b"]))
            i += 1
        if not layers:
            raise KeyError(prefix)
        return layers

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    def trainable(self) -> list[Tensor]:
        return [t for n, t in self.tensors.items() if n not in self.frozen]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}


# -- row groups ---------------------------------------------------------------------

class RowGroups:
    """Consecutive row blocks of a stacked batch (one block per sample).

    Pooling, broadcasting and attention stay inside a block, so a stacked
    forward pass computes the same numbers as one pass per sample.  A single
    group falls back to the plain row ops.
    """

    def __init__(self, counts: Sequence[int]):
        self.counts = np.asarray(counts, dtype=np.intp)
        if self.counts.ndim != 1 or self.counts.size == 0 or np.any(self.counts < 1):
            raise DimensionError(f"row groups need positive counts, got {list(counts)}")
        self.starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])
        self.ids = np.repeat(np.arange(self.counts.size), self.counts)
        self._pool = self._spread = None

    @property
    def n_groups(self) -> int:
        return int(self.counts.size)

    @property
    def n_rows(self) -> int:
        return int(self.counts.sum())

    def rows(self, g: int) -> np.ndarray:
        return np.arange(self.starts[g], self.starts[g] + self.counts[g])

    def pool(self, x) -> Tensor:
        """Per-group row mean, [n_groups x d]."""
        if self.n_groups == 1:
            return avgpool_rows(x)
        if self._pool is None:
            m = np.zeros((self.n_groups, self.n_rows))
            m[self.ids, np.arange(self.n_rows)] = 1.0 / self.counts[self.ids]
            self._pool = m
        return matmul(Tensor(self._pool), x)

    def spread(self, x) -> Tensor:
        """Repeat row g of ``x`` over the rows of group g."""
        if self.n_groups == 1:
            return broadcast_rows(x, self.n_rows)
        if self._spread is None:
            m = np.zeros((self.n_rows, self.n_groups))
            m[np.arange(self.n_rows), self.ids] = 1.0
            self._spread = m
        return matmul(Tensor(self._spread), x)



def grouped_attention(q, k, v, q_groups: RowGroups, k_groups: RowGroups | None = None,
                      owner: Sequence[int] | None = None) -> Tensor:
    """softmax(q_g k_h^T / sqrt(d)) v_h for each query group g and its key group h = owner[g].

    Same numbers as masking a dense attention to the group blocks, without the
    cross-block work.  ``k_groups`` defaults to ``q_groups`` with h = g.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    k_groups = q_groups if k_groups is None else k_groups
    owner = np.arange(q_groups.n_groups) if owner is None else np.asarray(owner, dtype=np.intp)
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise DimensionError(f"grouped_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if q.shape[0] != q_groups.n_rows or k.shape[0] != k_groups.n_rows or owner.size != q_groups.n_groups:
        raise DimensionError("grouped_attention: groups do not match the inputs")
    c = 1.0 / math.sqrt(q.shape[1])
    out = np.empty((q.shape[0], v.shape[1]))
    blocks = []
    for g in range(q_groups.n_groups):
        qs = slice(q_groups.starts[g], q_groups.starts[g] + q_groups.counts[g])
        h = owner[g]
        ks = slice(k_groups.starts[h], k_groups.starts[h] + k_groups.counts[h])
        z = (q.data[qs] @ k.data[ks].T) * c
        e = np.exp(z - z.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        out[qs] = p @ v.data[ks]
        blocks.append((qs, ks, p))

    def fn(gr):
        dq, dk, dv = np.zeros(q.shape), np.zeros(k.shape), np.zeros(v.shape)
        for qs, ks, p in blocks:
            gb = gr[qs]
            dv[ks] += p.T @ gb
            dp = gb @ v.data[ks].T
            dz = p * (dp - (dp * p).sum(axis=1, keepdims=True)) * c
            dq[qs] = dz @ k.data[ks]
            dk[ks] += dz.T @ q.data[qs]
        return dq, dk, dv

    return _make(out, (q, k, v), fn, "grouped_attention")


# -- gradient checking ------------------------------------------------------------

def numeric_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``x.data``."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn().data)
        flat[i] = orig - eps
        fm = float(fn().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


REL_ERROR_FLOOR = 1e-6
GRAD_FLOOR_FRACTION = 1e-3


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = REL_ERROR_FLOOR) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||, floor).

    The floor keeps structurally zero gradients (finite differences return
    roundoff of order 1e-12 there) from reading as a 100% error.
    """
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[[], Tensor], inputs: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must rebuild its graph from the current contents of ``inputs``.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    tape.free()
    # A tensor whose true gradient is exactly zero (e.g. a key bias under
    # softmax) only sees finite-difference roundoff, which grows with the loss
    # value; judge such tensors against the largest gradient in the case.
    floor = max(REL_ERROR_FLOOR, GRAD_FLOOR_FRACTION * max(np.linalg.norm(g) for g in analytic))
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        gn = numeric_grad(fn, t, eps)
        worst = max(worst, rel_error(ga, gn, floor))
    return worst

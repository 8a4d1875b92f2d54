"""Reverse-mode automatic differentiation over dense 2-D float64 matrices.

A Tensor wraps a numpy array and remembers how it was produced; backward()
walks the implicit tape in reverse topological order and accumulates exact
analytical gradients. Broadcasting is limited to row vectors (1, c) and
column vectors (r, 1) against (r, c) matrices. Everything is float64.
"""
from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


def _as_matrix(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D; got shape {arr.shape}")
    return np.ascontiguousarray(arr)


class Tensor:
    """Node in the autodiff graph: a value plus the recipe to backpropagate."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward: Callable | None = None):
        self.data = _as_matrix(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor carrying Adam moment estimates and a step counter."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def backward(loss: Tensor):
    """Accumulate d(loss)/d(node) for every reachable node on the tape."""
    if loss.data.shape != (1, 1):
        raise ShapeError(f"backward() needs a scalar loss; got {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    loss.accumulate(np.ones((1, 1)))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic with row/column-vector broadcasting

def _bcast_check(op: str, a: np.ndarray, b: np.ndarray):
    if a.shape == b.shape:
        return
    for x, y in ((a, b), (b, a)):
        if x.shape == (1, 1):
            return
        if x.shape[0] == 1 and x.shape[1] == y.shape[1]:
            return
        if x.shape[1] == 1 and x.shape[0] == y.shape[0]:
            return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return g.sum(keepdims=True).reshape(1, 1)
    if shape[0] == 1:
        return g.sum(axis=0, keepdims=True)
    return g.sum(axis=1, keepdims=True)


def _binary(op: str, a: Tensor, b: Tensor, fwd, da, db) -> Tensor:
    _bcast_check(op, a.data, b.data)
    out_data = fwd(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbcast(da(g, a.data, b.data, out_data), a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbcast(db(g, a.data, b.data, out_data), b.data.shape))

    return Tensor(out_data, parents=(a, b), backward=bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a: Tensor, b: Tensor) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y, lambda g, x, y, o: -g * x / (y * y))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        a.accumulate(g * c)

    return Tensor(a.data * c, parents=(a,), backward=bwd)


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        a.accumulate(g)

    return Tensor(a.data + c, parents=(a,), backward=bwd)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


# ---------------------------------------------------------------------------
# linear algebra and structure

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return Tensor(a.data @ b.data, parents=(a, b), backward=bwd)


def transpose(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate(g.T)

    return Tensor(a.data.T.copy(), parents=(a,), backward=bwd)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two equal-shape tensors, as a 1x1 tensor."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"dot: mismatched shapes {a.data.shape} and {b.data.shape}")

    def bwd(g):
        s = g[0, 0]
        if a.requires_grad:
            a.accumulate(s * b.data)
        if b.requires_grad:
            b.accumulate(s * a.data)

    return Tensor(np.sum(a.data * b.data).reshape(1, 1), parents=(a, b), backward=bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = parts[0].data.shape[1]
    for p in parts:
        if p.data.shape[1] != cols:
            raise ShapeError("concat_rows: column counts differ")
    sizes = [p.data.shape[0] for p in parts]

    def bwd(g):
        off = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                p.accumulate(g[off:off + n])
            off += n

    return Tensor(np.concatenate([p.data for p in parts], axis=0),
                  parents=tuple(parts), backward=bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.shape[0] != rows:
            raise ShapeError("concat_cols: row counts differ")
    sizes = [p.data.shape[1] for p in parts]

    def bwd(g):
        off = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                p.accumulate(g[:, off:off + n])
            off += n

    return Tensor(np.concatenate([p.data for p in parts], axis=1),
                  parents=tuple(parts), backward=bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        a.accumulate(full)

    return Tensor(a.data[start:stop].copy(), parents=(a,), backward=bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        a.accumulate(full)

    return Tensor(a.data[:, start:stop].copy(), parents=(a,), backward=bwd)


def rows(table: Tensor, indices) -> Tensor:
    """Embedding lookup: gather rows; gradient scatter-adds into the table."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(f"rows: index out of range for table with {table.data.shape[0]} rows")

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table.accumulate(full)

    return Tensor(table.data[idx].copy(), parents=(table,), backward=bwd)


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """Each row repeated k times in place: [r0,r0,..,r1,r1,..]."""
    n = a.data.shape[0]

    def bwd(g):
        a.accumulate(g.reshape(n, k, -1).sum(axis=1))

    return Tensor(np.repeat(a.data, k, axis=0), parents=(a,), backward=bwd)


def tile_rows(a: Tensor, k: int) -> Tensor:
    """Whole block repeated k times: [r0,r1,..,r0,r1,..]."""
    n = a.data.shape[0]

    def bwd(g):
        a.accumulate(g.reshape(k, n, -1).sum(axis=0))

    return Tensor(np.tile(a.data, (k, 1)), parents=(a,), backward=bwd)


def reshape(a: Tensor, rows_: int, cols: int) -> Tensor:
    if a.data.size != rows_ * cols:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as ({rows_}, {cols})")

    def bwd(g):
        a.accumulate(g.reshape(a.data.shape))

    return Tensor(a.data.reshape(rows_, cols).copy(), parents=(a,), backward=bwd)


def pad_block(a: Tensor, n_rows: int, n_cols: int, row_off: int, col_off: int) -> Tensor:
    """Place `a` inside a zero (n_rows, n_cols) matrix at the given offset."""
    r, c = a.data.shape
    if row_off + r > n_rows or col_off + c > n_cols:
        raise ShapeError("pad_block: block does not fit")

    def bwd(g):
        a.accumulate(g[row_off:row_off + r, col_off:col_off + c])

    out = np.zeros((n_rows, n_cols))
    out[row_off:row_off + r, col_off:col_off + c] = a.data
    return Tensor(out, parents=(a,), backward=bwd)


# ---------------------------------------------------------------------------
# reductions

def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate(np.full_like(a.data, g[0, 0]))

    return Tensor(a.data.sum().reshape(1, 1), parents=(a,), backward=bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        a.accumulate(np.full_like(a.data, g[0, 0] / n))

    return Tensor(a.data.mean().reshape(1, 1), parents=(a,), backward=bwd)


def row_sum(a: Tensor) -> Tensor:
    """Sum along columns, keeping a (rows, 1) shape."""
    def bwd(g):
        a.accumulate(np.broadcast_to(g, a.data.shape).copy())

    return Tensor(a.data.sum(axis=1, keepdims=True), parents=(a,), backward=bwd)


# ---------------------------------------------------------------------------
# nonlinearities

def _unary(a: Tensor, fwd, dfn) -> Tensor:
    out_data = fwd(a.data)

    def bwd(g):
        a.accumulate(g * dfn(a.data, out_data))

    return Tensor(out_data, parents=(a,), backward=bwd)


def sigmoid(a: Tensor) -> Tensor:
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary(a, fwd, lambda x, o: o * (1.0 - o))


def tanh(a: Tensor) -> Tensor:
    return _unary(a, np.tanh, lambda x, o: 1.0 - o * o)


def relu(a: Tensor) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, o: (x > 0).astype(np.float64))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    return _unary(a, lambda x: np.where(x > 0, x, slope * x),
                  lambda x, o: np.where(x > 0, 1.0, slope))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    return _unary(a, np.log, lambda x, o: 1.0 / x)


def exp(a: Tensor) -> Tensor:
    return _unary(a, np.exp, lambda x, o: o)


def square(a: Tensor) -> Tensor:
    return _unary(a, np.square, lambda x, o: 2.0 * x)


def clip_upper(a: Tensor, hi: float) -> Tensor:
    """min(a, hi); gradient passes only below the cap."""
    return _unary(a, lambda x: np.minimum(x, hi),
                  lambda x, o: (x < hi).astype(np.float64))


def softmax_rows(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        # d softmax: s * (g - sum(g*s))
        s = out_data
        a.accumulate(s * (g - (g * s).sum(axis=1, keepdims=True)))

    return Tensor(out_data, parents=(a,), backward=bwd)


def straight_through(soft: Tensor, hard_values: np.ndarray) -> Tensor:
    """Forward takes the hard values; gradient passes to the soft path unchanged."""
    hard = _as_matrix(hard_values)
    if hard.shape != soft.data.shape:
        raise ShapeError("straight_through: shape mismatch")

    def bwd(g):
        soft.accumulate(g)

    return Tensor(hard, parents=(soft,), backward=bwd)


def smooth_clamp(a: Tensor, lo: float = 1e-4, hi: float = 1.0 - 1e-4) -> Tensor:
    """Monotone squash into (lo, hi) with unit slope at the 0.5 midpoint.

    Preserves the 0.5 decision threshold when lo + hi == 1, which the binary
    gate consumers rely on.
    """
    width = hi - lo
    return add_scalar(scale(sigmoid(scale(add_scalar(a, -0.5), 4.0 / width)), width), lo)


# ---------------------------------------------------------------------------
# stochastic gate

def gumbel_binary_gate(beta: Tensor, tau: float, hard: bool,
                       rng: np.random.Generator | None) -> Tensor:
    """Two-class Gumbel-softmax over (beta, 1-beta) at temperature tau.

    With an RNG: returns the class-1 probability of the perturbed softmax
    (soft), or a straight-through 0/1 sample whose gradient follows the soft
    path (hard). Without an RNG: deterministic threshold [beta > 0.5] with no
    gradient, for inference.
    """
    if tau <= 0:
        raise ValueError(f"gate temperature must be positive; got {tau}")
    if np.any(beta.data <= 0) or np.any(beta.data >= 1):
        raise ValueError("gate probabilities must lie strictly inside (0, 1)")
    if rng is None:
        return constant((beta.data > 0.5).astype(np.float64))
    g1 = -np.log(-np.log(rng.random(beta.data.shape)))
    g0 = -np.log(-np.log(rng.random(beta.data.shape)))
    # stable two-class form: softmax over {log(beta)+g1, log(1-beta)+g0}
    a1 = add(log(beta), constant(g1))
    a0 = add(log(add_scalar(neg(beta), 1.0)), constant(g0))
    soft = sigmoid(scale(sub(a1, a0), 1.0 / tau))
    if hard:
        return straight_through(soft, (soft.data > 0.5).astype(np.float64))
    return soft


# ---------------------------------------------------------------------------
# optimizer

def adam_step(params: Iterable[Parameter], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; params with no gradient are untouched."""
    for p in params:
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError("non-finite gradient in adam_step")
        p.step += 1
        p.m = beta1 * p.m + (1 - beta1) * p.grad
        p.v = beta2 * p.v + (1 - beta2) * (p.grad * p.grad)
        m_hat = p.m / (1 - beta1 ** p.step)
        v_hat = p.v / (1 - beta2 ** p.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# checkpoint serialization: named float64 matrices, deterministic layout

_MAGIC = b"NTF1"


def save_tensors(path, named: dict[str, np.ndarray]):
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(named)))
        for name, arr in named.items():
            arr = _as_matrix(arr)
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            f.write(arr.astype("<f8").tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a tensor checkpoint")
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            r, c = struct.unpack("<II", f.read(8))
            data = np.frombuffer(f.read(8 * r * c), dtype="<f8").reshape(r, c)
            out[name] = data.astype(np.float64)
    return out

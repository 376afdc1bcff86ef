"""Minimal dense-tensor engine: float64 arrays, reverse-mode gradients, Adam.

Operations compute with numpy immediately; when a Tape is active (entered as
a context manager on the current thread) each op records itself so
Tape.backward can replay the chain in reverse. Without an active tape the
same functions run as plain numpy, which is how inference avoids gradient
overhead. One Tensor is never mutated by an op; only adam_step writes
parameter data in place, between tapes.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy import sparse


class AutodiffError(ValueError):
    pass


class Tensor:
    """Dense float64 tensor with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Execution-ordered record of ops for one forward pass."""

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._entries)

    def needs_grad(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._produced

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._entries.append((output, inputs, backward))
        self._produced.add(id(output))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d loss / d tensor into every requires_grad tensor's grad."""
        if loss.data.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for output, inputs, backward in reversed(self._entries):
            g = grads.pop(id(output), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None:
                    continue
                acc = grads.get(id(inp))
                grads[id(inp)] = gi if acc is None else acc + gi
            if output.requires_grad:
                output.grad = g if output.grad is None else output.grad + g
        for output, inputs, _ in self._entries:
            for inp in inputs:
                if inp.requires_grad and id(inp) in grads:
                    g = grads.pop(id(inp))
                    inp.grad = g if inp.grad is None else inp.grad + g
        if loss.requires_grad and id(loss) in grads:
            g = grads.pop(id(loss))
            loss.grad = g if loss.grad is None else loss.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _record(output: Tensor, inputs: tuple[Tensor, ...], make_backward) -> Tensor:
    tape = _active_tape()
    if tape is not None:
        needs = tuple(tape.needs_grad(t) for t in inputs)
        if any(needs):
            tape.record(output, inputs, make_backward(needs))
    return output


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; either operand may carry leading batch dimensions."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise AutodiffError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def make_backward(needs):
        def backward(g):
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape) if needs[0] else None
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape) if needs[1] else None
            return ga, gb

        return backward

    return _record(out, (a, b), make_backward)


def _elementwise(a: Tensor, b: Tensor, value: np.ndarray, da, db) -> Tensor:
    out = Tensor(value)

    def make_backward(needs):
        def backward(g):
            ga = _unbroadcast(da(g), a.data.shape) if needs[0] else None
            gb = _unbroadcast(db(g), b.data.shape) if needs[1] else None
            return ga, gb

        return backward

    return _record(out, (a, b), make_backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise(a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise(a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise(a, b, a.data * b.data, lambda g: g * b.data, lambda g: g * a.data)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda needs: lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    out = Tensor(np.where(mask, a.data, 0.0))
    return _record(out, (a,), lambda needs: lambda g: (g * mask,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise AutodiffError("concat of no tensors")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def make_backward(needs):
        def backward(g):
            pieces = np.split(g, offsets, axis=axis)
            return tuple(p if need else None for p, need in zip(pieces, needs))

        return backward

    return _record(out, tuple(tensors), make_backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape
    return _record(out, (a,), lambda needs: lambda g: (g.reshape(orig),))


def transpose_last2(a: Tensor) -> Tensor:
    out = Tensor(np.swapaxes(a.data, -1, -2))
    return _record(out, (a,), lambda needs: lambda g: (np.swapaxes(g, -1, -2),))


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def make_backward(needs):
        def backward(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            return (y * (g - dot),)

        return backward

    return _record(out, (a,), make_backward)


LAYER_NORM_EPS = 1e-5


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to mean 0, variance 1, then apply gain/bias."""
    n = a.data.shape[-1]
    if n < 2:
        raise AutodiffError(f"layer_norm needs >= 2 features, got {n}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def make_backward(needs):
        def backward(g):
            dxhat = g * gain.data
            dx = None
            if needs[0]:
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                dx = inv * (dxhat - m1 - xhat * m2)
            dgain = _unbroadcast(g * xhat, gain.data.shape) if needs[1] else None
            dbias = _unbroadcast(g, bias.data.shape) if needs[2] else None
            return dx, dgain, dbias

        return backward

    return _record(out, (a, gain, bias), make_backward)


def dropout(a: Tensor, p: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Zero entries with probability p in train mode; identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise AutodiffError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise AutodiffError(f"unknown dropout mode {mode!r}")
    if mode == "eval" or p == 0.0:
        return a
    if rng is None:
        raise AutodiffError("train-mode dropout needs an rng")
    keep = rng.random(a.data.shape) >= p
    factor = keep / (1.0 - p)
    out = Tensor(a.data * factor)
    return _record(out, (a,), lambda needs: lambda g: (g * factor,))


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(np.sum(a.data, axis=axis))
    shape = a.data.shape

    def make_backward(needs):
        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return backward

    return _record(out, (a,), make_backward)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(reduce_sum(a, axis=axis), 1.0 / count)


def reduce_max(a: Tensor, axis: int | None = None) -> Tensor:
    """Max reduction; gradient flows to the first argmax only."""
    if axis is None:
        flat_idx = int(np.argmax(a.data))
        out = Tensor(a.data.reshape(-1)[flat_idx])

        def make_backward(needs):
            def backward(g):
                ga = np.zeros_like(a.data)
                ga.reshape(-1)[flat_idx] = g
                return (ga,)

            return backward

        return _record(out, (a,), make_backward)
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = Tensor(np.take_along_axis(a.data, idx, axis=axis).squeeze(axis))

    def make_backward(needs):
        def backward(g):
            ga = np.zeros_like(a.data)
            np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
            return (ga,)

        return backward

    return _record(out, (a,), make_backward)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows (first axis) by integer index; duplicate indices allowed."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx])

    def make_backward(needs):
        def backward(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            return (ga,)

        return backward

    return _record(out, (a,), make_backward)


def build_aggregate_operator(src: np.ndarray, dst: np.ndarray, num_nodes: int, mode: str) -> sparse.csr_matrix:
    """Sparse matrix A with A @ H = per-node mean/sum of neighbor rows.

    CSR keeps column indices sorted, so the summation order is canonical and
    the aggregation is bit-identical under any permutation of edge storage.
    """
    if mode not in ("mean", "sum"):
        raise AutodiffError(f"no linear operator for aggregation {mode!r}")
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if mode == "mean":
        deg = np.bincount(dst, minlength=num_nodes)
        weights = 1.0 / np.maximum(deg, 1).astype(np.float64)[dst]
    else:
        weights = np.ones(len(dst), dtype=np.float64)
    a = sparse.csr_matrix((weights, (dst, src)), shape=(num_nodes, num_nodes))
    a.sort_indices()
    return a


def sparse_matmul(operator: sparse.csr_matrix, h: Tensor) -> Tensor:
    """Product of a constant sparse matrix with a dense tensor, rows x rows."""
    out = Tensor(operator @ h.data)
    return _record(out, (h,), lambda needs: lambda g: (operator.T @ g,))


def neighbor_aggregate(
    h: Tensor,
    src: np.ndarray,
    dst: np.ndarray,
    num_nodes: int,
    mode: str,
    operator: sparse.csr_matrix | None = None,
) -> Tensor:
    """Per-node reduction of neighbor rows: out[v] = mode{h[u] : (u -> v)}.

    src/dst list every directed message; nodes receiving none get a zero row.
    mean/sum run as a sparse matrix product (pass `operator` to reuse a
    prebuilt one). Max mode routes gradient to the first contributing edge in
    storage order per (node, column).
    """
    if mode not in ("mean", "sum", "max"):
        raise AutodiffError(f"unknown aggregation {mode!r}")
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    width = h.data.shape[1]

    if mode in ("mean", "sum"):
        if operator is None:
            operator = build_aggregate_operator(src, dst, num_nodes, mode)
        return sparse_matmul(operator, h)

    out_data = np.zeros((num_nodes, width), dtype=np.float64)
    order = np.argsort(dst, kind="stable")
    groups_dst, starts = np.unique(dst[order], return_index=True)
    winners_rows: list[np.ndarray] = []
    winners_nodes: list[int] = []
    bounds = list(starts[1:]) + [len(order)]
    for v, start, stop in zip(groups_dst, starts, bounds):
        rows = h.data[src[order[start:stop]]]
        am = np.argmax(rows, axis=0)
        out_data[v] = rows[am, np.arange(width)]
        winners_rows.append(src[order[start:stop]][am])
        winners_nodes.append(int(v))
    out = Tensor(out_data)

    def make_backward(needs):
        def backward(g):
            gh = np.zeros_like(h.data)
            cols = np.arange(width)
            for v, win in zip(winners_nodes, winners_rows):
                np.add.at(gh, (win, cols), g[v])
            return (gh,)

        return backward

    return _record(out, (h,), make_backward)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max discrepancy between backward grads and central finite differences.

    Per element: |numeric - analytic| / max(1, |numeric|, |analytic|), so the
    figure is relative for O(1)-scale gradients and absolute below that.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ana in zip(params, analytic):
        for i in range(p.data.size):
            keep = p.data.flat[i]
            p.data.flat[i] = keep + eps
            up = f().item()
            p.data.flat[i] = keep - eps
            down = f().item()
            p.data.flat[i] = keep
            if not (np.isfinite(up) and np.isfinite(down)):
                raise AutodiffError("non-finite loss during grad_check")
            num = (up - down) / (2.0 * eps)
            an = ana.reshape(-1)[i]
            worst = max(worst, abs(num - an) / max(1.0, abs(num), abs(an)))
    return worst


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update in place; grads stay untouched."""
    if len(params) != len(state.m):
        raise AutodiffError("adam_step: parameter list does not match state")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, m, v in zip(params, state.m, state.v):
        if p.grad is None:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise AutodiffError("adam_step: non-finite gradient")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()

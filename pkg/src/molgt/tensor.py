"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tape records every primitive executed while it is active; backward()
replays the records in reverse, accumulating vector-Jacobian products into
.grad of every tensor that requires gradients. The op set is exactly what
the encoder needs: elementwise arithmetic with limited broadcasting,
matmul, activations, reductions, concat/narrow/reshape views, embedding
lookup, affine maps, masked row softmax, layer norm, dropout, the two
node-edge contraction patterns, and a GRU cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed primitives (inputs always precede use)."""

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def __len__(self) -> int:
        return len(self.entries)


def _active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # elementwise arithmetic ------------------------------------------------

    def __add__(self, other):
        return _elementwise(self, _as_tensor(other), np.add, lambda a, b, g: (g, g))

    def __sub__(self, other):
        return _elementwise(self, _as_tensor(other), np.subtract, lambda a, b, g: (g, -g))

    def __mul__(self, other):
        return _elementwise(
            self, _as_tensor(other), np.multiply, lambda a, b, g: (g * b.data, g * a.data)
        )

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def exp(self) -> "Tensor":
        out = Tensor(np.exp(self.data), self.requires_grad)
        _record(out, (self,), lambda g: (g * out.data,))
        return out

    def sigmoid(self) -> "Tensor":
        y = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor(y, self.requires_grad)
        _record(out, (self,), lambda g: (g * y * (1.0 - y),))
        return out

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        out = Tensor(y, self.requires_grad)
        _record(out, (self,), lambda g: (g * (1.0 - y * y),))
        return out

    def relu(self) -> "Tensor":
        out = Tensor(np.maximum(self.data, 0.0), self.requires_grad)
        _record(out, (self,), lambda g: (g * (self.data > 0.0),))
        return out

    # reductions ------------------------------------------------------------

    def sum(self, axis: int | None = None) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis), self.requires_grad)
        shape = self.shape

        def bw(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        _record(out, (self,), bw)
        return out

    def mean(self, axis: int | None = None) -> "Tensor":
        count = self.data.size if axis is None else self.shape[axis]
        return scale(self.sum(axis=axis), 1.0 / count)

    # views -----------------------------------------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        out = Tensor(self.data.reshape(shape), self.requires_grad)
        old = self.shape
        _record(out, (self,), lambda g: (g.reshape(old),))
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: tuple[Tensor, ...], bw) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.entries.append((out, inputs, bw))
        out.tape_id = len(tape.entries) - 1


def _broadcastable(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    for da, db in zip(reversed(a), reversed(b)):
        if da != db and da != 1 and db != 1:
            return False
    return True


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _elementwise(a: Tensor, b: Tensor, fn, grads) -> Tensor:
    if not _broadcastable(a.shape, b.shape):
        raise ShapeMismatch(f"elementwise op on shapes {a.shape} and {b.shape}")
    out = Tensor(fn(a.data, b.data), a.requires_grad or b.requires_grad)

    def bw(g):
        ga, gb = grads(a, b, g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    _record(out, (a, b), bw)
    return out


def add(a, b) -> Tensor:
    return _as_tensor(a) + b


def sub(a, b) -> Tensor:
    return _as_tensor(a) - b


def mul(a, b) -> Tensor:
    return _as_tensor(a) * b


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c, x.requires_grad)
    _record(out, (x,), lambda g: (g * c,))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matmul, or batched with a stacked left operand (..., n, m)."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    if b.data.ndim > 2 and a.data.ndim != b.data.ndim:
        raise ShapeMismatch(f"unsupported matmul batching: {a.shape} vs {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), a.requires_grad or b.requires_grad)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if a.data.ndim > 2 and b.data.ndim == 2:
            flat_a = a.data.reshape(-1, a.shape[-1])
            flat_g = g.reshape(-1, g.shape[-1])
            gb = flat_a.T @ flat_g
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    _record(out, (a, b), bw)
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis % len(base)
        ):
            raise ShapeMismatch(f"concat of shapes {[t.shape for t in tensors]}")
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        any(t.requires_grad for t in tensors),
    )
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    _record(out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(x.data[index].copy(), x.requires_grad)

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    _record(out, (x,), bw)
    return out


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(table.data[idx], table.requires_grad)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    _record(out, (table,), bw)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) where x may carry any number of leading axes."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeMismatch(f"linear: bias {b.shape} vs weight {w.shape}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    requires = x.requires_grad or w.requires_grad or (b is not None and b.requires_grad)
    out = Tensor(y, requires)

    def bw(g):
        gx = g @ w.data.T
        flat_x = x.data.reshape(-1, x.shape[-1])
        flat_g = g.reshape(-1, g.shape[-1])
        gw = flat_x.T @ flat_g
        if b is None:
            return (gx, gw)
        return (gx, gw, flat_g.sum(axis=0))

    _record(out, (x, w) if b is None else (x, w, b), bw)
    return out


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax of a 2-D tensor. Mask entries are 0 (keep) or 1
    (exclude, treated as -inf). Fully masked rows come out all zero."""
    if x.data.ndim != 2:
        raise ShapeMismatch(f"softmax_rows wants 2-D input, got {x.shape}")
    if mask is not None and mask.shape != x.shape:
        raise ShapeMismatch(f"softmax mask {mask.shape} vs input {x.shape}")
    keep = np.ones_like(x.data, dtype=bool) if mask is None else (mask == 0)
    z = np.where(keep, x.data, -np.inf)
    rowmax = np.max(z, axis=1, keepdims=True)
    live = np.isfinite(rowmax)
    shifted = np.where(keep & live, z - np.where(live, rowmax, 0.0), -np.inf)
    e = np.where(np.isfinite(shifted), np.exp(np.where(np.isfinite(shifted), shifted, 0.0)), 0.0)
    denom = e.sum(axis=1, keepdims=True)
    y = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    out = Tensor(y, x.requires_grad)

    def bw(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    _record(out, (x,), bw)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    f = x.shape[-1]
    if gain.shape != (f,) or bias.shape != (f,):
        raise ShapeMismatch(f"layer_norm params {gain.shape}/{bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data,
                 x.requires_grad or gain.requires_grad or bias.requires_grad)

    def bw(g):
        flat_g = g.reshape(-1, f)
        flat_xhat = xhat.reshape(-1, f)
        ggain = (flat_g * flat_xhat).sum(axis=0)
        gbias = flat_g.sum(axis=0)
        gxhat = g * gain.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return (gx, ggain, gbias)

    _record(out, (x, gain, bias), bw)
    return out


def dropout(x: Tensor, rate: float, train_flag: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not train_flag or rate <= 0.0:
        out = Tensor(x.data.copy(), x.requires_grad)
        _record(out, (x,), lambda g: (g,))
        return out
    if rng is None:
        rng = np.random.default_rng()
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * keep, x.requires_grad)
    _record(out, (x,), lambda g: (g * keep,))
    return out


def contract_outgoing(q: Tensor, k: Tensor) -> Tensor:
    """out[v,u] = sum_f q[v,f] * k[v,u,f] (node v against edge (v,u))."""
    _check_contract(q, k)
    out = Tensor(np.einsum("vf,vuf->vu", q.data, k.data),
                 q.requires_grad or k.requires_grad)

    def bw(g):
        gq = np.einsum("vu,vuf->vf", g, k.data)
        gk = np.einsum("vu,vf->vuf", g, q.data)
        return (gq, gk)

    _record(out, (q, k), bw)
    return out


def contract_incoming(q: Tensor, k: Tensor) -> Tensor:
    """out[v,u] = sum_f q[v,f] * k[u,v,f] (node v against edge (u,v))."""
    _check_contract(q, k)
    out = Tensor(np.einsum("vf,uvf->vu", q.data, k.data),
                 q.requires_grad or k.requires_grad)

    def bw(g):
        gq = np.einsum("vu,uvf->vf", g, k.data)
        gk = np.einsum("vu,vf->uvf", g, q.data)
        return (gq, gk)

    _record(out, (q, k), bw)
    return out


def _check_contract(q: Tensor, k: Tensor) -> None:
    if q.data.ndim != 2 or k.data.ndim != 3:
        raise ShapeMismatch(f"contraction wants (n,f) and (n,n,f), got {q.shape} and {k.shape}")
    n, f = q.shape
    if k.shape != (n, n, f):
        raise ShapeMismatch(f"contraction shapes disagree: {q.shape} vs {k.shape}")


@dataclass
class GruParams:
    w_r: Tensor
    w_z: Tensor
    w_h: Tensor
    b_r: Tensor
    b_z: Tensor
    b_h: Tensor


def gru_cell(x: Tensor, h_prev: Tensor, params: GruParams) -> Tensor:
    """One GRU step: r = s(W_r [x;h]), z = s(W_z [x;h]),
    cand = tanh(W_h [x; r*h]), out = (1-z)*cand + z*h."""
    if x.shape != h_prev.shape:
        raise ShapeMismatch(f"gru_cell input {x.shape} vs state {h_prev.shape}")
    xh = concat([x, h_prev], axis=-1)
    r = linear(xh, params.w_r, params.b_r).sigmoid()
    z = linear(xh, params.w_z, params.b_z).sigmoid()
    cand = linear(concat([x, r * h_prev], axis=-1), params.w_h, params.b_h).tanh()
    one = Tensor(np.ones_like(z.data))
    return (one - z) * cand + z * h_prev


def bce_with_logits(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over unmasked entries, in the numerically
    stable log-sum-exp form. Gradient is hand-written (no log primitive)."""
    z = logits.data
    count = float(mask.sum())
    per = np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    out = Tensor((per * mask).sum() / count, logits.requires_grad)

    def bw(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        return (g * (sig - targets) * mask / count,)

    _record(out, (logits,), bw)
    return out


def backward(loss: Tensor) -> None:
    """Reverse traversal of the active tape from loss; accumulates into
    .grad of every requires_grad tensor, then clears the tape."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}")
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward() requires an active Tape")
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones_like(loss.data)
    for out, inputs, bw in reversed(tape.entries):
        g = flowing.pop(id(out), None)
        if g is None:
            continue
        for inp, gin in zip(inputs, bw(g)):
            if gin is None or not inp.requires_grad:
                continue
            gin = np.asarray(gin, dtype=np.float64)
            if id(inp) in flowing:
                flowing[id(inp)] = flowing[id(inp)] + gin
            else:
                flowing[id(inp)] = gin
            inp.grad = gin if inp.grad is None else inp.grad + gin
    tape.entries.clear()


def finite_difference_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| relative
    error for the scalar-valued tensor function f at x."""
    x.zero_grad()
    x.requires_grad = True
    with Tape():
        backward(f(x))
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.zero_grad()

    worst = 0.0
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x).data)
        flat[i] = orig - h
        down = float(f(x).data)
        flat[i] = orig
        numeric = (up - down) / (2.0 * h)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)),
                  requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)

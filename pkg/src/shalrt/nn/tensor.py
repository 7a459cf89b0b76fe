"""Dense tensors with reverse-mode gradients.

Every differentiable op builds its output with :func:`_result`, which records
the parent tensors and a closure mapping the output gradient to one gradient
per parent. :meth:`Tensor.backward` walks that graph in reverse topological
order. The graph lives only as long as the forward pass that built it.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import DimensionError

DEFAULT_DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    __float__ = item

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into the ``grad`` of every leaf."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar; the functions below do the work
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
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a, _dt(b)), as_tensor(b, _dt(a))
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a, _dt(b)), as_tensor(b, _dt(a))
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a, _dt(b)), as_tensor(b, _dt(a))
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a, _dt(b)), as_tensor(b, _dt(a))
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _result(ad / bd, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; inputs below ``floor`` are clamped and pass no gradient."""
    xd = x.data
    if floor > 0.0:
        keep = xd >= floor
        y = np.log(np.where(keep, xd, floor))
        return _result(y, (x,), lambda g: (np.where(keep, g / np.where(keep, xd, 1.0), 0.0),))
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _result(np.where(keep, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * keep,))


def where(cond, a: Tensor, b: Tensor) -> Tensor:
    """Select from ``a`` where ``cond`` holds, else from ``b`` (cond is a plain array)."""
    a, b = as_tensor(a, _dt(b)), as_tensor(b, _dt(a))
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)

    return _result(np.where(cond, a.data, b.data), (a, b), backward)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def _dt(x):
    return x.dtype if isinstance(x, Tensor) else None


# ------------------------------------------------------------------- shaping

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _result(x.data[index], (x,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` (embedding gather)."""
    ids = np.asarray(ids, dtype=np.int64)
    shape, dtype = table.shape, table.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, *shape[1:]))
        return (out,)

    return _result(table.data[ids], (table,), backward)


def pick(x: Tensor, ids) -> Tensor:
    """``out[...] = x[..., ids[...]]`` along the last axis."""
    ids = np.asarray(ids, dtype=np.int64)[..., None]
    shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.put_along_axis(out, ids, g[..., None], axis=-1)
        return (out,)

    return _result(np.take_along_axis(x.data, ids, axis=-1)[..., 0], (x,), backward)


# ---------------------------------------------------------------- reductions

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# -------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    y = xd @ wd.T
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(y, parents, backward)


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum. Every input index must appear in the other input or the output."""
    lhs, out = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for mine, other in ((sa, sb), (sb, sa)):
        for ch in mine:
            if ch not in other and ch not in out:
                raise DimensionError(f"einsum index {ch!r} in {spec!r} is summed in one operand only")
    ad, bd = a.data, b.data

    def backward(g):
        return np.einsum(f"{out},{sb}->{sa}", g, bd), np.einsum(f"{out},{sa}->{sb}", g, ad)

    return _result(np.einsum(spec, ad, bd), (a, b), backward)


# ---------------------------------------------------------- fused primitives

def _masked_softmax(x: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    z = np.where(mask, x, -np.inf)
    top = z.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(z - top), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    # fully masked rows get all-zero weights
    return e / np.where(total > 0, total, 1.0)


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis`` (row-max stabilised).

    ``mask`` (broadcastable booleans) excludes entries; excluded entries get
    weight 0 and a row with no admissible entry becomes all zeros.
    """
    if axis not in (-1, x.ndim - 1):
        moved = transpose(x, _swap_last(x.ndim, axis))
        m = None if mask is None else np.swapaxes(np.broadcast_to(mask, x.shape), axis, -1)
        return transpose(softmax(moved, -1, m), _swap_last(x.ndim, axis))
    y = _masked_softmax(x.data, mask)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward)


def _swap_last(ndim: int, axis: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[axis], axes[-1] = axes[-1], axes[axis]
    return tuple(axes)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: feature size {d} vs gain {gain.shape} / bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    gd = gain.data

    def backward(g):
        gx_hat = g * gd
        gx = inv / d * (d * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return _result(xhat * gd + bias.data, (x, gain, bias), backward)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        from ..errors import ConfigError

        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit generator")
    keep = (rng.random(x.shape) >= p) * (1.0 / (1.0 - p))
    keep = keep.astype(x.dtype)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def attention_core(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None,
                   rel_k: Tensor | None = None, rel_v: Tensor | None = None,
                   rel_index: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention on projected inputs.

    q: (B, Lq, d); k, v: (B, Lk, d); mask broadcastable to (B, heads, Lq, Lk),
    True where a key may be attended. With ``rel_k``/``rel_v`` tables of shape
    (R, d/heads) and an integer ``rel_index`` of shape (Lq, Lk), the key and
    value of every (query, key) pair receive the table row ``rel_index[p, q]``.
    """
    B, Lq, d = q.shape
    Lk = k.shape[1]
    if v.shape[1] != Lk:
        from ..errors import AlignmentError

        raise AlignmentError(f"attention keys ({Lk}) and values ({v.shape[1]}) differ in length")
    hd = d // heads
    scale = 1.0 / np.sqrt(hd)
    Q = q.data.reshape(B, Lq, heads, hd).transpose(0, 2, 1, 3)
    K = k.data.reshape(B, Lk, heads, hd).transpose(0, 2, 1, 3)
    V = v.data.reshape(B, Lk, heads, hd).transpose(0, 2, 1, 3)
    relative = rel_k is not None
    S = Q @ K.transpose(0, 1, 3, 2)
    if relative:
        AK = rel_k.data[rel_index]
        AV = rel_v.data[rel_index]
        S = S + _rel_scores(Q, AK)
    P = _masked_softmax(S * scale, mask)
    O = P @ V
    if relative:
        O = O + _rel_values(P, AV)
    out = O.transpose(0, 2, 1, 3).reshape(B, Lq, d)

    parents = (q, k, v) + ((rel_k, rel_v) if relative else ())

    def backward(g):
        GO = g.reshape(B, Lq, heads, hd).transpose(0, 2, 1, 3)
        GP = GO @ V.transpose(0, 1, 3, 2)
        GV = P.transpose(0, 1, 3, 2) @ GO
        if relative:
            GP = GP + _rel_scores(GO, AV)
        GS = P * (GP - (GP * P).sum(axis=-1, keepdims=True)) * scale
        GQ = GS @ K
        GK = GS.transpose(0, 1, 3, 2) @ Q
        grads = [GQ.transpose(0, 2, 1, 3).reshape(B, Lq, d),
                 GK.transpose(0, 2, 1, 3).reshape(B, Lk, d),
                 GV.transpose(0, 2, 1, 3).reshape(B, Lk, d)]
        if relative:
            GQ_rel = _rel_values(GS, AK)
            grads[0] = grads[0] + GQ_rel.transpose(0, 2, 1, 3).reshape(B, Lq, d)
            gak = np.einsum("bhpq,bhpd->pqd", GS, Q)
            gav = np.einsum("bhpq,bhpd->pqd", P, GO)
            wk = np.zeros_like(rel_k.data)
            wv = np.zeros_like(rel_v.data)
            np.add.at(wk, rel_index.reshape(-1), gak.reshape(-1, hd))
            np.add.at(wv, rel_index.reshape(-1), gav.reshape(-1, hd))
            grads += [wk, wv]
        return tuple(grads)

    return _result(out, parents, backward)


def _rel_scores(Q: np.ndarray, A: np.ndarray) -> np.ndarray:
    # (B,h,p,d) x (p,q,d) -> (B,h,p,q), batched over p as a matmul
    B, h, p, d = Q.shape
    Qp = Q.transpose(2, 0, 1, 3).reshape(p, B * h, d)
    return (Qp @ A.transpose(0, 2, 1)).reshape(p, B, h, -1).transpose(1, 2, 0, 3)


def _rel_values(P: np.ndarray, A: np.ndarray) -> np.ndarray:
    # (B,h,p,q) x (p,q,d) -> (B,h,p,d)
    B, h, p, q = P.shape
    Pp = P.transpose(2, 0, 1, 3).reshape(p, B * h, q)
    return (Pp @ A).reshape(p, B, h, -1).transpose(1, 2, 0, 3)



def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, -1)


# -------------------------------------------------------------------- losses

LOG_FLOOR = 1e-12


def cross_entropy(pred_dist: Tensor, target, floor: float = LOG_FLOOR) -> Tensor:
    """Cross-entropy of a probability vector against a class index or a distribution.

    A hard target gives ``-log p[target]``; a distribution gives
    ``-sum(target * log p)``. Logs are clamped at ``floor``.
    """
    from ..errors import LabelError

    if isinstance(target, (int, np.integer)):
        c = pred_dist.shape[-1]
        if not 0 <= target < c:
            raise LabelError(f"target class {target} outside [0, {c})")
        return -log(pred_dist[..., int(target)], floor)
    target = as_tensor(target, pred_dist.dtype)
    if target.shape != pred_dist.shape:
        raise DimensionError(f"cross_entropy: prediction {pred_dist.shape} vs target {target.shape}")
    return -tsum(target * log(pred_dist, floor))


def nll(probs: Tensor, targets, mask=None, floor: float = LOG_FLOOR) -> Tensor:
    """Per-item ``-log probs[..., target]`` summed over positions where ``mask`` holds.

    Returns a tensor shaped like ``targets`` reduced over its last axis when a
    mask is given, i.e. one value per example.
    """
    losses = -log(pick(probs, targets), floor)
    if mask is None:
        return losses
    return tsum(losses * np.asarray(mask, dtype=probs.dtype), axis=-1)


def soft_cross_entropy(pred: Tensor, target: Tensor, mask=None, floor: float = LOG_FLOOR) -> Tensor:
    """``-sum_c target_c log pred_c`` per position, summed over masked positions."""
    per_pos = -tsum(target * log(pred, floor), axis=-1)
    if mask is None:
        return per_pos
    return tsum(per_pos * np.asarray(mask, dtype=pred.dtype), axis=-1)

"""Parameter containers and the reusable layers built on them."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Base class: parameters and submodules are discovered from attributes.

    Enumeration order follows attribute assignment order, so a given
    configuration always yields the same ordered list of names.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for child in value:
                    if isinstance(child, Module):
                        yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays into parameters; returns names absent from ``state``."""
        missing = []
        for name, p in self.named_parameters():
            if name not in state:
                missing.append(name)
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                from ..errors import DimensionError

                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        if strict and missing:
            from ..errors import ContractError

            raise ContractError(f"missing parameters: {', '.join(missing)}")
        return missing


# ------------------------------------------------------------- initialisers

def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, dtype) -> Parameter:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-bound, bound, size=(fan_out, fan_in)), dtype=dtype)


def normal_table(rng: np.random.Generator, rows: int, dim: int, dtype) -> Parameter:
    return Parameter(rng.normal(0.0, dim ** -0.5, size=(rows, dim)), dtype=dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float64):
        self.weight = xavier_uniform(rng, d_out, d_in, dtype)
        self.bias = Parameter(np.zeros(d_out), dtype=dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, rows: int, dim: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = normal_table(rng, rows, dim, dtype)

    def __call__(self, ids) -> Tensor:
        return T.take(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float64):
        self.gain = Parameter(np.ones(dim), dtype=dtype)
        self.bias = Parameter(np.zeros(dim), dtype=dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    """Two linear maps with a ReLU in between."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, dtype=np.float64):
        self.inner = Linear(d_model, d_ff, rng, dtype=dtype)
        self.outer = Linear(d_ff, d_model, rng, dtype=dtype)

    def __call__(self, x: Tensor, dropout: float = 0.0, rng=None) -> Tensor:
        hidden = T.relu(self.inner(x))
        hidden = T.dropout(hidden, dropout, self.training, rng)
        return self.outer(hidden)


class MultiHeadAttention(Module):
    """Multi-head attention whose Q/K/V/output maps are bias-free projections.

    ``rel_clip`` > 0 (or 0 with ``relative=True``) adds learned relative
    position rows to keys and values, indexed by ``clip(p - q, l) + l``.
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, relative: bool = False,
                 rel_clip: int = 0, dtype=np.float64):
        if d_model % heads:
            from ..errors import ConfigError

            raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")
        self.heads = heads
        self.wq = xavier_uniform(rng, d_model, d_model, dtype)
        self.wk = xavier_uniform(rng, d_model, d_model, dtype)
        self.wv = xavier_uniform(rng, d_model, d_model, dtype)
        self.wo = xavier_uniform(rng, d_model, d_model, dtype)
        self.rel_clip = rel_clip
        self.relative = relative
        if relative:
            hd = d_model // heads
            self.rel_k = normal_table(rng, 2 * rel_clip + 1, hd, dtype)
            self.rel_v = normal_table(rng, 2 * rel_clip + 1, hd, dtype)

    def relative_index(self, lq: int, lk: int) -> np.ndarray:
        return relative_index(lq, lk, self.rel_clip)

    def project(self, q_src: Tensor, k_src: Tensor, v_src: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return T.linear(q_src, self.wq), T.linear(k_src, self.wk), T.linear(v_src, self.wv)

    def __call__(self, q_src: Tensor, k_src: Tensor, v_src: Tensor, mask=None) -> Tensor:
        if k_src.shape[-2] != v_src.shape[-2]:
            from ..errors import AlignmentError

            raise AlignmentError(
                f"attention keys ({k_src.shape[-2]}) and values ({v_src.shape[-2]}) differ in length")
        q, k, v = self.project(q_src, k_src, v_src)
        if self.relative:
            idx = self.relative_index(q.shape[1], k.shape[1])
            z = T.attention_core(q, k, v, self.heads, mask, self.rel_k, self.rel_v, idx)
        else:
            z = T.attention_core(q, k, v, self.heads, mask)
        return T.linear(z, self.wo)

    def weights(self, q_src: Tensor, k_src: Tensor, mask=None) -> np.ndarray:
        """Attention weights (B, heads, Lq, Lk) without the relative terms' values."""
        B, Lq, d = q_src.shape
        Lk = k_src.shape[1]
        hd = d // self.heads
        q = (q_src.data @ self.wq.data.T).reshape(B, Lq, self.heads, hd).transpose(0, 2, 1, 3)
        k = (k_src.data @ self.wk.data.T).reshape(B, Lk, self.heads, hd).transpose(0, 2, 1, 3)
        s = q @ k.transpose(0, 1, 3, 2)
        if self.relative:
            s = s + T._rel_scores(q, self.rel_k.data[self.relative_index(Lq, Lk)])
        return T._masked_softmax(s / np.sqrt(hd), mask)


def clip_distance(x, limit: int):
    return np.maximum(-limit, np.minimum(x, limit))


def relative_index(lq: int, lk: int, limit: int) -> np.ndarray:
    p = np.arange(lq)[:, None]
    q = np.arange(lk)[None, :]
    return clip_distance(p - q, limit) + limit

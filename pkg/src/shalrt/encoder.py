"""Relative-position Transformer encoder, SLU heads and the layer-refined mechanism."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .nn import tensor as T
from .nn.modules import FeedForward, LayerNorm, Module, MultiHeadAttention, Parameter, clip_distance, \
    normal_table, xavier_uniform
from .nn.tensor import Tensor, _result

clip = clip_distance


@dataclass
class EncoderConfig:
    n_layers: int = 6
    d_model: int = 768
    heads: int = 8
    rel_clip: int = 16
    d_ff: int = 0
    dropout: float = 0.0
    lrm_enabled: bool = True
    lrm_positions: tuple = (2,)
    lrm_shared_heads: bool = True
    standard_residual: bool = False
    eps: float = 1e-5

    def __post_init__(self):
        self.lrm_positions = tuple(sorted(set(int(k) for k in self.lrm_positions)))
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.lrm_enabled:
            for k in self.lrm_positions:
                if not 1 <= k < self.n_layers:
                    raise ConfigError(f"lrm position {k} outside [1, {self.n_layers - 1}]")


class EncoderLayer(Module):
    """``H = Norm(Z + FFN(Z))`` where ``Z`` is relative-position self-attention.

    With ``standard_residual`` the attention output is first merged as
    ``Z = Norm(x + attn(x))``.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads, rng, relative=True, rel_clip=cfg.rel_clip,
                                            dtype=dtype)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff or 4 * cfg.d_model, rng, dtype=dtype)
        if cfg.standard_residual:
            self.norm_attn = LayerNorm(cfg.d_model, cfg.eps, dtype)
        self.norm = LayerNorm(cfg.d_model, cfg.eps, dtype)

    def __call__(self, x: Tensor, attn_mask: np.ndarray, rng=None) -> Tensor:
        p = self.cfg.dropout
        z = T.dropout(self.self_attn(x, x, x, attn_mask[:, None, None, :]), p, self.training, rng)
        if self.cfg.standard_residual:
            z = self.norm_attn(x + z)
        return self.norm(z + T.dropout(self.ffn(z, p, rng), p, self.training, rng))


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg
        self.layers = [EncoderLayer(cfg, rng, dtype) for _ in range(cfg.n_layers)]


def encoder_layer(layer: EncoderLayer, x: Tensor, attn_mask: np.ndarray | None = None, rng=None) -> Tensor:
    if attn_mask is None:
        attn_mask = np.ones(x.shape[:2], dtype=bool)
    return layer(x, attn_mask, rng)


def rel_self_attention(attn: MultiHeadAttention, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    m = None if mask is None else mask[:, None, None, :]
    return attn(x, x, x, m)


# --------------------------------------------------------------------- heads

def slot_logits(h: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``W_S (h_j ++ h_cls) + b_S`` for every position j without materialising the concat."""
    B, L, d = h.shape
    if weight.shape[1] != 2 * d:
        from .errors import DimensionError

        raise DimensionError(f"slot head expects width {2 * d}, got weight {weight.shape}")
    hd, wd = h.data, weight.data
    left, right = wd[:, :d], wd[:, d:]
    cls = hd[:, 0]
    y = hd @ left.T + (cls @ right.T + bias.data)[:, None, :]

    def backward(g):
        g_cls = g.sum(axis=1)
        gh = g @ left
        gh[:, 0] += g_cls @ right
        gw = np.concatenate([g.reshape(-1, g.shape[-1]).T @ hd.reshape(-1, d), g_cls.T @ cls], axis=1)
        return gh, gw, g_cls.sum(axis=0)

    return _result(y, (h, weight, bias), backward)


class Heads(Module):
    def __init__(self, d_model: int, n_intents: int, n_slots: int, rng: np.random.Generator, dtype=np.float64):
        self.W_I = xavier_uniform(rng, n_intents, d_model, dtype)
        self.b_I = Parameter(np.zeros(n_intents), dtype=dtype)
        self.W_S = xavier_uniform(rng, n_slots, 2 * d_model, dtype)
        self.b_S = Parameter(np.zeros(n_slots), dtype=dtype)

    def logits(self, h: Tensor) -> tuple[Tensor, Tensor]:
        return T.linear(h[:, 0], self.W_I, self.b_I), slot_logits(h, self.W_S, self.b_S)

    def __call__(self, h: Tensor) -> tuple[Tensor, Tensor]:
        intent, slots = self.logits(h)
        return T.softmax(intent), T.softmax(slots)


def classify(heads: Heads, H: Tensor) -> tuple[Tensor, Tensor]:
    """Intent distribution (B, d_i) and slot distributions (B, L, d_s).

    Slot rows exist for every position; callers keep only real-token rows.
    """
    return heads(H)


# ----------------------------------------------------------------------- LRM

class LrmTables(Module):
    def __init__(self, d_model: int, n_intents: int, n_slots: int, rng: np.random.Generator, dtype=np.float64):
        self.E_I = normal_table(rng, d_model, n_intents, dtype)
        self.E_S = normal_table(rng, d_model, n_slots, dtype)
        self.v_attn = Parameter(rng.normal(0.0, d_model ** -0.5, size=d_model), dtype=dtype)


def lrm_mix(h: Tensor, p_int: Tensor, p_slot: Tensor, E_I: Tensor, E_S: Tensor, v: Tensor,
            slot_mask: np.ndarray) -> Tensor:
    """Add soft result embeddings to the hidden states.

    ``e_I = E_I p_int`` and ``e_S_j = E_S p_slot_j``; slot positions get
    ``e_S_j``, the CLS position gets ``e_I + sum_j a_j e_S_j`` with ``a`` a
    softmax of ``v . e_S_j`` over the slot positions.
    """
    if E_I.shape[0] != h.shape[-1] or E_S.shape[0] != h.shape[-1]:
        raise ConfigError(f"result embedding width {E_I.shape[0]} differs from hidden width {h.shape[-1]}")
    m = slot_mask[..., None].astype(h.dtype)
    EI, ES, vd = E_I.data, E_S.data, v.data
    pi, ps = p_int.data, p_slot.data
    e_int = pi @ EI.T
    e_slot = ps @ ES.T
    alpha = T._masked_softmax(e_slot @ vd, slot_mask)
    summary = np.einsum("bl,bld->bd", alpha, e_slot)
    out = h.data + m * e_slot
    out[:, 0] += e_int + summary

    def backward(g):
        g0 = g[:, 0]
        g_alpha = e_slot @ g0[:, :, None]
        g_alpha = g_alpha[..., 0]
        g_score = alpha * (g_alpha - (alpha * g_alpha).sum(axis=-1, keepdims=True))
        g_slot = m * g + alpha[..., None] * g0[:, None, :] + g_score[..., None] * vd
        g_slot2 = g_slot.reshape(-1, g_slot.shape[-1])
        return (g,
                g0 @ EI,
                g_slot @ ES,
                g0.T @ pi,
                g_slot2.T @ ps.reshape(-1, ps.shape[-1]),
                (g_score[..., None] * e_slot).sum(axis=(0, 1)))

    return _result(out, (h, p_int, p_slot, E_I, E_S, v), backward)


def lrm_apply(H_k: Tensor, heads: Heads, tables: LrmTables, slot_mask: np.ndarray | None = None):
    """Preliminary prediction from ``H_k`` mixed back in; returns (H', p_intent, p_slots)."""
    if slot_mask is None:
        slot_mask = np.ones(H_k.shape[:2], dtype=bool)
        slot_mask[:, 0] = False
    p_int, p_slot = heads(H_k)
    return lrm_mix(H_k, p_int, p_slot, tables.E_I, tables.E_S, tables.v_attn, slot_mask), p_int, p_slot


@dataclass
class EncoderOutput:
    H: Tensor
    intent: Tensor
    slots: Tensor
    preliminary: list[tuple[Tensor, Tensor]] = field(default_factory=list)


def encoder_forward(encoder: Encoder, heads: Heads, x: Tensor, attn_mask: np.ndarray, slot_mask: np.ndarray,
                    lrm: list[LrmTables] | None = None, lrm_heads: list[Heads] | None = None,
                    rng=None) -> EncoderOutput:
    cfg = encoder.cfg
    refine = {}
    if cfg.lrm_enabled and lrm:
        for i, k in enumerate(cfg.lrm_positions):
            refine[k] = (lrm_heads[i] if lrm_heads else heads, lrm[i])
    preliminary = []
    h = x
    for j, layer in enumerate(encoder.layers, start=1):
        h = layer(h, attn_mask, rng)
        if j in refine:
            h, p_int, p_slot = lrm_apply(h, *refine[j], slot_mask)
            preliminary.append((p_int, p_slot))
    intent, slots = heads(h)
    return EncoderOutput(h, intent, slots, preliminary)


def predicted_labels(intent: np.ndarray, slots: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return intent.argmax(axis=-1), slots.argmax(axis=-1)

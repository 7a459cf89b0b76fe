"""Slot label generation: a training-only autoregressive decoder and the joint objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .nn import tensor as T
from .nn.modules import Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from .nn.optim import OptimizerState, optimizer_step
from .nn.tensor import Tensor


@dataclass
class SlgConfig:
    n_decoder_layers: int = 6
    alpha: float = 0.35
    lam: float = 0.75
    teacher_forcing: bool = True
    consistency_target: str = "tagger"
    consistency_detach: bool = True

    def __post_init__(self):
        if self.n_decoder_layers < 1:
            raise ConfigError("the decoder needs at least one layer")
        if not 0.0 <= self.alpha <= 0.5:
            raise ConfigError(f"alpha must lie in [0, 0.5], got {self.alpha}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.consistency_target not in ("tagger", "generator"):
            raise ConfigError(f"unknown consistency target {self.consistency_target!r}")


def sinusoid_table(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate[: dim // 2])
    return table


class DecoderLayer(Module):
    def __init__(self, d_model: int, heads: int, d_ff: int, rng: np.random.Generator, dropout: float = 0.0,
                 eps: float = 1e-5, dtype=np.float64):
        self.dropout = dropout
        self.self_attn = MultiHeadAttention(d_model, heads, rng, dtype=dtype)
        self.cross_attn = MultiHeadAttention(d_model, heads, rng, dtype=dtype)
        self.ffn = FeedForward(d_model, d_ff, rng, dtype=dtype)
        self.norm_self = LayerNorm(d_model, eps, dtype)
        self.norm_cross = LayerNorm(d_model, eps, dtype)
        self.norm_ffn = LayerNorm(d_model, eps, dtype)

    def __call__(self, y: Tensor, memory: Tensor, self_mask: np.ndarray, memory_mask: np.ndarray, rng=None):
        p, train = self.dropout, self.training
        y = self.norm_self(y + T.dropout(self.self_attn(y, y, y, self_mask), p, train, rng))
        y = self.norm_cross(y + T.dropout(self.cross_attn(y, memory, memory, memory_mask), p, train, rng))
        return self.norm_ffn(y + T.dropout(self.ffn(y, p, rng), p, train, rng))


class Decoder(Module):
    """Post-norm Transformer decoder over slot labels; id ``n_slots`` is BOS."""

    def __init__(self, d_model: int, heads: int, n_slots: int, n_layers: int, rng: np.random.Generator,
                 d_ff: int = 0, dropout: float = 0.0, eps: float = 1e-5, dtype=np.float64):
        self.n_slots = n_slots
        self.label_embedding = Embedding(n_slots + 1, d_model, rng, dtype)
        self.layers = [DecoderLayer(d_model, heads, d_ff or 4 * d_model, rng, dropout, eps, dtype)
                       for _ in range(n_layers)]
        self.generator = Linear(d_model, n_slots, rng, dtype=dtype)
        self._positions = np.zeros((0, d_model), dtype=dtype)

    @property
    def bos_id(self) -> int:
        return self.n_slots

    def positions(self, n: int) -> np.ndarray:
        if n > len(self._positions):
            self._positions = sinusoid_table(max(n, 64), self.label_embedding.weight.shape[1]).astype(
                self.label_embedding.weight.dtype)
        return self._positions[:n]


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def decoder_forward(decoder: Decoder, encoder_H: Tensor, shifted_gold: np.ndarray, enc_mask=None,
                    dec_mask=None, rng=None) -> Tensor:
    """Teacher-forced label distributions (B, n, d_s).

    ``shifted_gold`` is BOS followed by the gold labels moved right by one.
    Position j sees the encoder states and inputs 0..j only.
    """
    shifted_gold = np.asarray(shifted_gold)
    if shifted_gold.ndim == 1:
        shifted_gold = shifted_gold[None]
    B, n = shifted_gold.shape
    if encoder_H.shape[0] != B:
        raise ContractError(f"decoder batch {B} does not match encoder batch {encoder_H.shape[0]}")
    if n < 1 or n > encoder_H.shape[1] - 1:
        raise ContractError(f"decoder length {n} does not fit an encoder sequence of length {encoder_H.shape[1]}")
    if enc_mask is None:
        enc_mask = np.ones(encoder_H.shape[:2], dtype=bool)
    keys = causal_mask(n)[None, None]
    if dec_mask is not None:
        keys = keys & np.asarray(dec_mask, dtype=bool)[:, None, None, :]
    memory_mask = np.asarray(enc_mask, dtype=bool)[:, None, None, :]
    y = decoder.label_embedding(shifted_gold) + decoder.positions(n)
    for layer in decoder.layers:
        y = layer(y, encoder_H, keys, memory_mask, rng)
    return T.softmax(decoder.generator(y))


def greedy_decode(decoder: Decoder, encoder_H: Tensor, n: int, enc_mask=None) -> np.ndarray:
    """Token-serial decoding: one full decoder pass per emitted label (no caching)."""
    B = encoder_H.shape[0]
    inputs = np.full((B, 1), decoder.bos_id, dtype=np.int64)
    out = np.zeros((B, n), dtype=np.int64)
    with T.no_grad():
        for j in range(n):
            probs = decoder_forward(decoder, encoder_H, inputs, enc_mask)
            out[:, j] = probs.data[:, -1].argmax(axis=-1)
            inputs = np.concatenate([inputs, out[:, j:j + 1]], axis=1)
    return out


# -------------------------------------------------------------------- losses

def slu_loss(intent_probs: Tensor, slot_probs: Tensor, gold_intents, gold_slots, slot_mask) -> Tensor:
    """``-log p(intent) - sum_j log p(slot_j)`` per example, averaged over the batch."""
    gold_intents = np.asarray(gold_intents)
    per_example = T.nll(intent_probs, gold_intents) + T.nll(slot_probs, gold_slots, slot_mask)
    return T.mean(per_example)


def slg_loss(gen_probs: Tensor, gold, tag_probs: Tensor, alpha: float, mask=None, target: str = "tagger",
             detach: bool = True) -> Tensor:
    """``(1 - alpha) * NLL(gold) + alpha * CE(generator, tagger)``, summed over positions, batch-averaged.

    ``target="tagger"`` uses the tagger distribution as the soft target;
    ``"generator"`` swaps the roles. ``detach`` blocks gradients through the target.
    """
    if gen_probs.shape != tag_probs.shape:
        raise ContractError(f"generator distributions {gen_probs.shape} misaligned with tagger {tag_probs.shape}")
    gold = np.asarray(gold)
    if gold.shape != gen_probs.shape[:-1]:
        raise ContractError(f"gold labels {gold.shape} misaligned with distributions {gen_probs.shape[:-1]}")
    if mask is None:
        mask = np.ones(gold.shape, dtype=bool)
    if target == "tagger":
        pred, soft = gen_probs, tag_probs
    else:
        pred, soft = tag_probs, gen_probs
    if detach:
        soft = soft.detach()
    generation = T.nll(gen_probs, gold, mask)
    consistency = T.soft_cross_entropy(pred, soft, mask)
    return T.mean(generation * (1.0 - alpha) + consistency * alpha)


def align_slots(slot_probs: Tensor, slot_mask: np.ndarray, n: int) -> Tensor:
    """Gather the tagger rows of real tokens into (B, n, d_s), left-aligned like the decoder."""
    B = slot_probs.shape[0]
    index = np.zeros((B, n), dtype=np.int64)
    for i in range(B):
        pos = np.flatnonzero(slot_mask[i])
        index[i, :len(pos)] = pos
    return slot_probs[np.arange(B)[:, None], index]


@dataclass
class SlgBatchOutput:
    gen_probs: Tensor | None
    slg_loss: Tensor | None
    slu_loss: Tensor
    total: Tensor


def joint_step(model, batch, state: OptimizerState, rng=None, max_grad_norm: float = 0.0) -> SlgBatchOutput:
    """Forward, backward and one optimizer update over every parameter that takes part."""
    model.train()
    out = model.losses(batch, rng)
    params = list(model.trainable_parameters())
    for _, p in params:
        p.zero_grad()
    out.total.backward()
    for _, p in params:
        # parameters outside this batch's graph (e.g. history layers on a history-free batch)
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    optimizer_step(params, state, max_grad_norm)
    return out

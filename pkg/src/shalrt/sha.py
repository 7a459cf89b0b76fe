"""Salient history attention: mixes the current utterance with earlier turns.

Keys always come from the historical utterances and values from either the
utterances or their recorded SLU results, so the two history sequences must
be position-aligned (each turn's CLS embedding pairs with its intent).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, ConfigError
from .nn import tensor as T
from .nn.modules import FeedForward, LayerNorm, Module, MultiHeadAttention, normal_table
from .nn.tensor import Tensor

VARIANTS = ("sequential", "parallel")
ABLATIONS = ("full", "utterance_only", "result_only", "result_attention_only", "off")


@dataclass
class ShaConfig:
    n_layers: int = 3
    d_model: int = 768
    heads: int = 8
    variant: str = "sequential"
    ablation: str = "full"
    d_ff: int = 0
    dropout: float = 0.0
    eps: float = 1e-5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown SHA variant {self.variant!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown SHA ablation {self.ablation!r}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.ablation != "off" and self.n_layers < 1:
            raise ConfigError("SHA needs at least one layer")


@dataclass
class HistoryEmbeddings:
    E_u: Tensor          # (B, H, d) earlier utterances, CLS first per turn
    E_r: Tensor          # (B, H, d) intent then slot embeddings per turn
    mask: np.ndarray     # (B, H)

    def __post_init__(self):
        if self.E_u.shape != self.E_r.shape:
            raise AlignmentError(f"history utterance side {self.E_u.shape} != result side {self.E_r.shape}")
        if self.mask.shape != self.E_u.shape[:2]:
            raise AlignmentError(f"history mask {self.mask.shape} does not match {self.E_u.shape[:2]}")

    @property
    def length(self) -> int:
        return self.E_u.shape[1]

    @property
    def has_history(self) -> np.ndarray:
        return self.mask.any(axis=1)

    def key_mask(self) -> np.ndarray:
        return self.mask[:, None, None, :]


class ShaLayer(Module):
    def __init__(self, cfg: ShaConfig, rng: np.random.Generator, dtype=np.float64):
        d, h = cfg.d_model, cfg.heads
        self.cfg = cfg
        self.self_attn = MultiHeadAttention(d, h, rng, dtype=dtype)
        if cfg.ablation in ("full", "utterance_only"):
            self.hist_utt_attn = MultiHeadAttention(d, h, rng, dtype=dtype)
        if cfg.ablation != "utterance_only":
            self.hist_res_attn = MultiHeadAttention(d, h, rng, dtype=dtype)
        self.ffn = FeedForward(d, cfg.d_ff or 4 * d, rng, dtype=dtype)
        self.norm_c = LayerNorm(d, cfg.eps, dtype)
        # sequential: norm_u after utterance attention, norm_r after result attention;
        # parallel: norm_u merges both branches
        if cfg.variant == "parallel" or cfg.ablation in ("full", "utterance_only"):
            self.norm_u = LayerNorm(d, cfg.eps, dtype)
        if cfg.variant == "sequential" and cfg.ablation != "utterance_only":
            self.norm_r = LayerNorm(d, cfg.eps, dtype)
        self.norm_out = LayerNorm(d, cfg.eps, dtype)

    def _drop(self, x: Tensor, rng) -> Tensor:
        return T.dropout(x, self.cfg.dropout, self.training, rng)

    def __call__(self, x: Tensor, hist: HistoryEmbeddings | None, attn_mask: np.ndarray, rng=None) -> Tensor:
        H_c = self.norm_c(x + self._drop(self.self_attn(x, x, x, attn_mask[:, None, None, :]), rng))
        if self.cfg.variant == "parallel":
            H = self._parallel(H_c, hist, rng)
        else:
            H = self._sequential(H_c, hist, rng)
        return self.norm_out(H + self._drop(self.ffn(H, self.cfg.dropout, rng), rng))

    def _sequential(self, H_c: Tensor, hist, rng) -> Tensor:
        if hist is None or hist.length == 0:
            return H_c
        ablation = self.cfg.ablation
        mask = hist.key_mask()
        keep = hist.has_history[:, None, None]
        H = H_c
        if ablation in ("full", "utterance_only"):
            att = self._drop(self.hist_utt_attn(H, hist.E_u, hist.E_u, mask), rng)
            H = T.where(keep, self.norm_u(H + att), H)
        if ablation == "utterance_only":
            return H
        keys = hist.E_r if ablation == "result_only" else hist.E_u
        att = self._drop(self.hist_res_attn(H, keys, hist.E_r, mask), rng)
        return T.where(keep, self.norm_r(H + att), H)

    def _parallel(self, H_c: Tensor, hist, rng) -> Tensor:
        if hist is None or hist.length == 0:
            return self.norm_u(H_c)
        ablation = self.cfg.ablation
        mask = hist.key_mask()
        merged = H_c
        # rows without history attend to nothing and receive exact zeros here
        if ablation in ("full", "utterance_only"):
            merged = merged + self._drop(self.hist_utt_attn(H_c, hist.E_u, hist.E_u, mask), rng)
        if ablation != "utterance_only":
            keys = hist.E_r if ablation == "result_only" else hist.E_u
            merged = merged + self._drop(self.hist_res_attn(H_c, keys, hist.E_r, mask), rng)
        return self.norm_u(merged)


class SalientHistoryAttention(Module):
    """N history-attention layers; returns the encoder input ``e + H_hat``.

    Result embeddings use dedicated intent (d_i x d) and slot (d_s x d)
    tables; historical utterances reuse the caller's token embedding table.
    """

    def __init__(self, cfg: ShaConfig, n_intents: int, n_slots: int, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg
        self.n_intents = n_intents
        if cfg.ablation != "off":
            self.intent_results = normal_table(rng, n_intents, cfg.d_model, dtype)
            self.slot_results = normal_table(rng, n_slots, cfg.d_model, dtype)
            self.layers = [ShaLayer(cfg, rng, dtype) for _ in range(cfg.n_layers)]
        else:
            self.layers = []

    @property
    def enabled(self) -> bool:
        return self.cfg.ablation != "off"

    def embed_history(self, token_table: Tensor, hist_tokens: np.ndarray, hist_results: np.ndarray,
                      hist_is_intent: np.ndarray, hist_mask: np.ndarray) -> HistoryEmbeddings:
        if hist_tokens.shape != hist_results.shape:
            raise AlignmentError(f"history tokens {hist_tokens.shape} vs results {hist_results.shape}")
        E_u = T.take(token_table, hist_tokens)
        table = T.concat([self.intent_results, self.slot_results], axis=0)
        ids = np.where(hist_is_intent, hist_results, hist_results + self.n_intents)
        E_r = T.take(table, ids)
        return HistoryEmbeddings(E_u, E_r, hist_mask)

    def __call__(self, e: Tensor, hist: HistoryEmbeddings | None, attn_mask: np.ndarray, rng=None) -> Tensor:
        if not self.enabled:
            return e
        x = e
        for layer in self.layers:
            x = layer(x, hist, attn_mask, rng)
        return x + e


def sha_forward(module: SalientHistoryAttention, e: Tensor, hist: HistoryEmbeddings | None,
                attn_mask: np.ndarray | None = None, rng=None) -> Tensor:
    if attn_mask is None:
        attn_mask = np.ones(e.shape[:2], dtype=bool)
    return module(e, hist, attn_mask, rng)

"""The full SHA-LRT model: embeddings, history attention, encoder with LRM, heads and the SLG decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .config import RunConfig
from .data import Batch
from .nn import tensor as T
from .nn.modules import Embedding, Module
from .sha import SalientHistoryAttention, ShaConfig
from .slg import Decoder, SlgBatchOutput, align_slots, decoder_forward, slg_loss, slu_loss


@dataclass
class Prediction:
    intents: np.ndarray            # (B,)
    slots: list[np.ndarray]        # per example, one id per real token
    intent_probs: np.ndarray
    slot_probs: np.ndarray


def sha_config(cfg: RunConfig) -> ShaConfig:
    return ShaConfig(cfg.sha_layers, cfg.d_model, cfg.heads, cfg.sha_variant, cfg.sha_ablation, cfg.d_ff,
                     cfg.dropout, cfg.layer_norm_eps)


def encoder_config(cfg: RunConfig) -> enc.EncoderConfig:
    return enc.EncoderConfig(cfg.encoder_layers, cfg.d_model, cfg.heads, cfg.rel_pos_clip, cfg.d_ff, cfg.dropout,
                             cfg.lrm_enabled, cfg.lrm_positions, cfg.lrm_shared_heads, cfg.standard_residual,
                             cfg.layer_norm_eps)


class ShaLrt(Module):
    """Parameters are named ``embedding.*``, ``sha.*``, ``encoder.*``, ``heads.*``, ``lrm.*`` and ``slg.*``."""

    def __init__(self, cfg: RunConfig, vocab_size: int, n_intents: int, n_slots: int,
                 rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        dtype = np.dtype(cfg.dtype)
        self.cfg = cfg
        self.n_intents, self.n_slots = n_intents, n_slots
        self.embedding = Embedding(vocab_size, cfg.d_model, rng, dtype)
        self.sha = SalientHistoryAttention(sha_config(cfg), n_intents, n_slots, rng, dtype)
        self.encoder = enc.Encoder(encoder_config(cfg), rng, dtype)
        self.heads = enc.Heads(cfg.d_model, n_intents, n_slots, rng, dtype)
        self.lrm = []
        self.lrm_heads = []
        if cfg.lrm_enabled:
            self.lrm = [enc.LrmTables(cfg.d_model, n_intents, n_slots, rng, dtype) for _ in cfg.lrm_positions]
            if not cfg.lrm_shared_heads:
                self.lrm_heads = [enc.Heads(cfg.d_model, n_intents, n_slots, rng, dtype) for _ in cfg.lrm_positions]
        self.slg = None
        if cfg.slg_enabled:
            self.slg = Decoder(cfg.d_model, cfg.heads, n_slots, cfg.decoder_layers, rng, cfg.d_ff, cfg.dropout,
                               cfg.layer_norm_eps, dtype)

    @property
    def bos_id(self) -> int:
        return self.n_slots

    def drop_decoder(self) -> None:
        self.slg = None

    def uses_decoder(self) -> bool:
        return self.slg is not None and self.cfg.slg_lambda > 0

    def trainable_parameters(self):
        for name, p in self.named_parameters():
            if name.startswith("slg.") and not self.uses_decoder():
                continue
            yield name, p

    # ------------------------------------------------------------ forward

    def encode(self, batch: Batch, rng=None) -> enc.EncoderOutput:
        e = self.embedding(batch.tokens)
        hist = None
        if self.sha.enabled and batch.hist_tokens.shape[1]:
            hist = self.sha.embed_history(self.embedding.weight, batch.hist_tokens, batch.hist_results,
                                          batch.hist_is_intent, batch.hist_mask)
        x = self.sha(e, hist, batch.attn_mask, rng)
        return enc.encoder_forward(self.encoder, self.heads, x, batch.attn_mask, batch.slot_mask, self.lrm,
                                   self.lrm_heads, rng)

    def losses(self, batch: Batch, rng=None) -> SlgBatchOutput:
        cfg = self.cfg
        out = self.encode(batch, rng)
        l_slu = slu_loss(out.intent, out.slots, batch.intents, batch.slot_targets, batch.slot_mask)
        if cfg.lrm_intermediate_loss:
            for p_int, p_slot in out.preliminary:
                l_slu = l_slu + slu_loss(p_int, p_slot, batch.intents, batch.slot_targets, batch.slot_mask)
        if not self.uses_decoder():
            return SlgBatchOutput(None, None, l_slu, l_slu)
        gen = decoder_forward(self.slg, out.H, batch.dec_inputs, batch.attn_mask, batch.dec_mask, rng)
        tagged = align_slots(out.slots, batch.slot_mask, batch.dec_inputs.shape[1])
        l_slg = slg_loss(gen, batch.dec_targets, tagged, cfg.slg_alpha, batch.dec_mask, cfg.consistency_target,
                         cfg.consistency_detach)
        return SlgBatchOutput(gen, l_slg, l_slu, l_slu + l_slg * cfg.slg_lambda)

    def predict(self, batch: Batch) -> Prediction:
        """Argmax labels; never touches the decoder."""
        was_training = self.training
        if was_training:
            self.eval()
        try:
            with T.no_grad():
                out = self.encode(batch)
        finally:
            if was_training:
                self.train()
        ip, sp = out.intent.data, out.slots.data
        slot_ids = sp.argmax(axis=-1)
        slots = [slot_ids[i, batch.slot_mask[i]] for i in range(len(batch))]
        return Prediction(ip.argmax(axis=-1), slots, ip, sp)

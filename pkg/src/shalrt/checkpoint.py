"""Binary checkpoint container.

Layout: 8-byte magic, little-endian u64 header length, a UTF-8 JSON header
(sorted keys, no whitespace), then every array as little-endian float64 in
C order, in the order the header lists them. Parameters come first, then the
optimizer's first and second moments when present.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import LabelSets, Vocab
from .errors import CheckpointError
from .nn.optim import OptimizerState

MAGIC = b"SHALRTCK"
FORMAT_VERSION = 1
_F64 = np.dtype("<f8")


@dataclass
class Checkpoint:
    config: RunConfig
    vocab: Vocab
    labels: LabelSets
    params: dict[str, np.ndarray]
    optimizer: OptimizerState | None = None
    meta: dict = field(default_factory=dict)


def _header(ck: Checkpoint) -> dict:
    head = {
        "format_version": FORMAT_VERSION,
        "config": ck.config.to_dict(),
        "vocab": list(ck.vocab.itos),
        "labels": {"intents": list(ck.labels.intent_labels), "slots": list(ck.labels.slot_labels)},
        "params": [[name, list(arr.shape)] for name, arr in ck.params.items()],
        "meta": ck.meta,
    }
    if ck.optimizer is not None:
        st = ck.optimizer
        head["optimizer"] = {
            "kind": st.kind, "learning_rate": st.learning_rate, "betas": list(st.betas), "eps": st.eps,
            "weight_decay": st.weight_decay, "step_count": st.step_count,
            "moments": [[name, list(m.shape)] for name, m in st.first_moment.items()],
        }
    return head


def to_bytes(ck: Checkpoint) -> bytes:
    header = json.dumps(_header(ck), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<Q", len(header)), header]
    arrays = list(ck.params.values())
    if ck.optimizer is not None:
        names = list(ck.optimizer.first_moment)
        arrays += [ck.optimizer.first_moment[n] for n in names]
        arrays += [ck.optimizer.second_moment[n] for n in names]
    parts += [np.ascontiguousarray(a, dtype=_F64).tobytes() for a in arrays]
    return b"".join(parts)


def from_bytes(blob: bytes) -> Checkpoint:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        (n,) = struct.unpack("<Q", blob[8:16])
        head = json.loads(blob[16:16 + n].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if head.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {head.get('format_version')!r}")
    offset = 16 + n

    def read(shape):
        nonlocal offset
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError("checkpoint payload is truncated")
        arr = np.frombuffer(blob, dtype=_F64, count=count, offset=offset).reshape(shape).astype(np.float64)
        offset = end
        return arr

    params = {name: read(shape) for name, shape in head["params"]}
    optimizer = None
    if "optimizer" in head:
        o = head["optimizer"]
        names = [(name, shape) for name, shape in o["moments"]]
        first = {name: read(shape) for name, shape in names}
        second = {name: read(shape) for name, shape in names}
        optimizer = OptimizerState(o["kind"], o["learning_rate"], tuple(o["betas"]), o["eps"], o["weight_decay"],
                                   first, second, o["step_count"])
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after the checkpoint payload")
    vocab = Vocab()
    vocab.itos = list(head["vocab"])
    vocab.stoi = {t: i for i, t in enumerate(vocab.itos)}
    labels = LabelSets(head["labels"]["intents"], head["labels"]["slots"])
    return Checkpoint(RunConfig.from_dict(head["config"]), vocab, labels, params, optimizer, head.get("meta", {}))


def save(ck: Checkpoint, path) -> Path:
    """Write atomically (temporary file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ck))
    os.replace(tmp, path)
    return path


def load(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return from_bytes(blob)


def from_model(model, vocab: Vocab, labels: LabelSets, optimizer: OptimizerState | None = None,
               meta: dict | None = None) -> Checkpoint:
    params = {name: p.data.copy() for name, p in model.named_parameters()}
    return Checkpoint(model.cfg, vocab, labels, params, optimizer, dict(meta or {}))


def build_model(ck: Checkpoint, **config_overrides):
    """Instantiate the model a checkpoint describes and load its weights.

    Missing ``slg.*`` weights are tolerated: the decoder is then simply absent.
    Other missing parameters raise.
    """
    from .config import replace
    from .errors import ContractError
    from .model import ShaLrt

    cfg = replace(ck.config, **config_overrides) if config_overrides else ck.config
    if cfg.slg_enabled and not any(name.startswith("slg.") for name in ck.params):
        cfg = replace(cfg, slg_enabled=False)
    model = ShaLrt(cfg, ck.vocab.size, ck.labels.n_intents, ck.labels.n_slots, rng=0)
    missing = model.load_state_dict(ck.params, strict=False)
    if missing:
        raise ContractError(f"checkpoint lacks parameters: {', '.join(missing)}")
    model.eval()
    return model

"""Corpus loading, vocabularies, history bundles, and padded batches."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, LabelError, LabelSchemaError, ParseError

PAD, UNK, CLS = 0, 1, 2
RESERVED = ("<pad>", "<unk>", "<cls>")

HISTORY_SOURCES = ("gold", "predicted")


class Vocab:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        idx = self.stoi.get(token)
        if idx is None:
            idx = self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return idx

    def encode(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def size(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos


@dataclass
class LabelSets:
    intent_labels: list[str]
    slot_labels: list[str]

    def __post_init__(self):
        self._intent_ids = {s: i for i, s in enumerate(self.intent_labels)}
        self._slot_ids = {s: i for i, s in enumerate(self.slot_labels)}
        validate_slot_schema(self.slot_labels)

    @property
    def n_intents(self) -> int:
        return len(self.intent_labels)

    @property
    def n_slots(self) -> int:
        return len(self.slot_labels)

    def intent_id(self, label: str) -> int:
        try:
            return self._intent_ids[label]
        except KeyError:
            raise LabelError(f"unknown intent label {label!r}") from None

    def slot_id(self, label: str) -> int:
        try:
            return self._slot_ids[label]
        except KeyError:
            raise LabelError(f"unknown slot label {label!r}") from None

    def slot_names(self, ids: Sequence[int]) -> list[str]:
        return [self.slot_labels[i] for i in ids]

    @classmethod
    def from_labels(cls, intents: Iterable[str], slots: Iterable[str]) -> "LabelSets":
        slot_set = set(slots) - {"O"}
        return cls(sorted(set(intents)), ["O"] + sorted(slot_set))


def validate_slot_schema(slot_labels: Sequence[str]) -> None:
    labels = set(slot_labels)
    for lab in slot_labels:
        if lab == "O":
            continue
        if len(lab) < 3 or lab[1] != "-" or lab[0] not in "BI":
            raise LabelSchemaError(f"slot label {lab!r} is not in IOB format")
        if lab[0] == "I" and f"B-{lab[2:]}" not in labels:
            raise LabelSchemaError(f"slot label {lab!r} has no matching B-{lab[2:]}")


@dataclass
class Turn:
    words: list[str]
    tokens: list[int]
    gold_intent: int
    gold_slots: list[int]
    predicted_intent: int | None = None
    predicted_slots: list[int] | None = None

    def __post_init__(self):
        if len(self.gold_slots) != len(self.tokens):
            raise ContractError(f"{len(self.tokens)} tokens but {len(self.gold_slots)} slot labels")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class DialogueSession:
    id: str
    turns: list[Turn]

    def __post_init__(self):
        if not self.turns:
            raise ContractError(f"session {self.id!r} has no turns")

    def clear_predictions(self) -> None:
        for turn in self.turns:
            turn.predicted_intent = None
            turn.predicted_slots = None


def record_prediction(session: DialogueSession, turn_index: int, intent_id: int, slot_ids: Sequence[int]) -> None:
    turn = session.turns[turn_index]
    if len(slot_ids) != len(turn.tokens):
        raise ContractError(
            f"session {session.id!r} turn {turn_index}: {len(slot_ids)} predicted slots for {len(turn.tokens)} tokens")
    turn.predicted_intent = int(intent_id)
    turn.predicted_slots = [int(s) for s in slot_ids]


# ------------------------------------------------------------------ loading

def _tokenize(words: Iterable[str]) -> list[str]:
    out = []
    for w in words:
        out.extend(w.lower().split())
    return out


def _read_records(path: Path, fmt: str) -> list[dict]:
    if fmt not in ("multi_turn", "single_turn"):
        raise ConfigError(f"unknown corpus format {fmt!r}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            turns = rec.get("turns") if isinstance(rec, dict) else None
            if not isinstance(turns, list) or not turns:
                raise ParseError("record needs a non-empty 'turns' list", lineno)
            if fmt == "single_turn" and len(turns) != 1:
                raise ParseError(f"single-turn record has {len(turns)} turns", lineno)
            for t in turns:
                if not isinstance(t, dict) or not {"tokens", "slots", "intent"} <= t.keys():
                    raise ParseError("turn needs 'tokens', 'slots' and 'intent'", lineno)
                words = _tokenize(t["tokens"])
                if len(words) != len(t["slots"]):
                    raise ParseError(f"{len(words)} tokens but {len(t['slots'])} slots", lineno)
                if not words:
                    raise ParseError("empty utterance", lineno)
            rec.setdefault("id", f"{path.stem}-{len(records)}")
            rec["_line"] = lineno
            records.append(rec)
    return records


def load_corpus(path, fmt: str = "multi_turn", vocab: Vocab | None = None,
                labels: LabelSets | None = None) -> tuple[list[DialogueSession], Vocab, LabelSets]:
    """Read a JSON-lines corpus.

    When ``vocab``/``labels`` are omitted they are built from this file (the
    training split); otherwise the given ones are used, unseen words map to
    UNK and unseen labels raise :class:`LabelError`.
    """
    path = Path(path)
    records = _read_records(path, fmt)
    if labels is None:
        intents, slots = [], []
        for rec in records:
            for t in rec["turns"]:
                intents.append(t["intent"])
                slots.extend(t["slots"])
        labels = LabelSets.from_labels(intents, slots)
    build_vocab = vocab is None
    if build_vocab:
        vocab = Vocab()
    sessions = []
    for rec in records:
        turns = []
        for t in rec["turns"]:
            words = _tokenize(t["tokens"])
            ids = [vocab.add(w) for w in words] if build_vocab else [vocab.encode(w) for w in words]
            try:
                gold_intent = labels.intent_id(t["intent"])
                gold_slots = [labels.slot_id(s) for s in t["slots"]]
            except LabelError as exc:
                raise LabelError(f"{path}: line {rec['_line']}: {exc}") from None
            turns.append(Turn(words, ids, gold_intent, gold_slots))
        sessions.append(DialogueSession(str(rec["id"]), turns))
    return sessions, vocab, labels


def session_to_record(session: DialogueSession, labels: LabelSets) -> dict:
    return {
        "id": session.id,
        "turns": [
            {"tokens": list(t.words), "slots": labels.slot_names(t.gold_slots),
             "intent": labels.intent_labels[t.gold_intent]}
            for t in session.turns
        ],
    }


def write_corpus(sessions: Iterable[DialogueSession], labels: LabelSets, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            fh.write(json.dumps(session_to_record(s, labels)) + "\n")


def convert_conll(src, dst) -> int:
    """Convert token<TAB>slot blocks ending in ``#intent=<label>`` to single-turn JSONL.

    Returns the number of utterances written.
    """
    src, dst = Path(src), Path(dst)
    out = []
    tokens: list[str] = []
    slots: list[str] = []
    start = 1
    with open(src, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    lines.append("")
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            if tokens:
                raise ParseError("utterance block has no '#intent=' line", start)
            start = lineno + 1
            continue
        if line.startswith("#intent="):
            if not tokens:
                raise ParseError("'#intent=' line without tokens", lineno)
            out.append({"id": f"{src.stem}-{len(out)}",
                        "turns": [{"tokens": tokens, "slots": slots, "intent": line[len("#intent="):]}]})
            tokens, slots = [], []
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(f"expected 'token<TAB>slot', got {raw!r}", lineno)
        tokens.append(parts[0])
        slots.append(parts[1])
    with open(dst, "w", encoding="utf-8") as fh:
        for rec in out:
            fh.write(json.dumps(rec) + "\n")
    return len(out)


# ------------------------------------------------------------------ history

@dataclass
class HistoryBundle:
    """Aligned history sources for one turn.

    ``tokens`` holds each earlier turn as CLS followed by its token ids;
    ``results`` holds, at the same positions, that turn's intent id (at the
    CLS slot, flagged by ``is_intent``) and then its slot ids.
    """

    tokens: list[int] = field(default_factory=list)
    results: list[int] = field(default_factory=list)
    is_intent: list[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tokens)

    def check(self) -> None:
        if not (len(self.tokens) == len(self.results) == len(self.is_intent)):
            raise ContractError(
                f"history sides differ: {len(self.tokens)} utterance vs {len(self.results)} result positions")
        for tok, flag in zip(self.tokens, self.is_intent):
            if (tok == CLS) != flag:
                raise ContractError("intent result not aligned with a CLS position")


def history_bundle(session: DialogueSession, turn_index: int, source: str = "gold") -> HistoryBundle:
    """History of ``turn_index``: every earlier turn of the session, in order.

    ``source`` picks the result side: "gold" labels, "predicted" records (all
    earlier turns must have been recorded), or "predicted_or_gold".
    """
    bundle = HistoryBundle()
    for t, turn in enumerate(session.turns[:turn_index]):
        if source == "gold":
            intent, slots = turn.gold_intent, turn.gold_slots
        elif turn.predicted_intent is not None:
            intent, slots = turn.predicted_intent, turn.predicted_slots
        elif source == "predicted_or_gold":
            intent, slots = turn.gold_intent, turn.gold_slots
        elif source == "predicted":
            raise ContractError(f"session {session.id!r} turn {t} has no recorded prediction")
        else:
            raise ConfigError(f"unknown history source {source!r}")
        bundle.tokens.append(CLS)
        bundle.tokens.extend(turn.tokens)
        bundle.results.append(intent)
        bundle.results.extend(slots)
        bundle.is_intent.append(True)
        bundle.is_intent.extend([False] * len(slots))
    bundle.check()
    return bundle


# ------------------------------------------------------------------ batches

@dataclass
class Batch:
    tokens: np.ndarray          # (B, L) with CLS at position 0
    attn_mask: np.ndarray       # (B, L) True on CLS and real tokens
    slot_mask: np.ndarray       # (B, L) True on the current turn's tokens
    slot_targets: np.ndarray    # (B, L) gold slot ids at slot_mask positions
    intents: np.ndarray         # (B,)
    dec_inputs: np.ndarray      # (B, n) BOS then gold slots shifted right
    dec_targets: np.ndarray     # (B, n)
    dec_mask: np.ndarray        # (B, n)
    hist_tokens: np.ndarray     # (B, H)
    hist_results: np.ndarray    # (B, H)
    hist_is_intent: np.ndarray  # (B, H)
    hist_mask: np.ndarray       # (B, H)
    refs: list[tuple[DialogueSession, int]]

    def __len__(self) -> int:
        return len(self.refs)

    @property
    def has_history(self) -> np.ndarray:
        return self.hist_mask.any(axis=1)

    def slot_positions(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.slot_mask[i])


def build_batch(refs: Sequence[tuple[DialogueSession, int]], bos_id: int, history_source: str = "gold",
                cat_all: bool = False) -> Batch:
    """Pad the given (session, turn index) examples into one batch."""
    B = len(refs)
    turns = [s.turns[t] for s, t in refs]
    bundles = [history_bundle(s, t, history_source) for s, t in refs]
    n_max = max(len(t) for t in turns)
    if cat_all:
        prefix = [[tok for tok in b.tokens if tok != CLS] for b in bundles]
    else:
        prefix = [[] for _ in refs]
    L = 1 + max(len(p) + len(t) for p, t in zip(prefix, turns))
    H = 0 if cat_all else max(len(b) for b in bundles)

    tokens = np.full((B, L), PAD, dtype=np.int64)
    attn_mask = np.zeros((B, L), dtype=bool)
    slot_mask = np.zeros((B, L), dtype=bool)
    slot_targets = np.zeros((B, L), dtype=np.int64)
    dec_inputs = np.zeros((B, n_max), dtype=np.int64)
    dec_targets = np.zeros((B, n_max), dtype=np.int64)
    dec_mask = np.zeros((B, n_max), dtype=bool)
    hist_tokens = np.full((B, H), PAD, dtype=np.int64)
    hist_results = np.zeros((B, H), dtype=np.int64)
    hist_is_intent = np.zeros((B, H), dtype=bool)
    hist_mask = np.zeros((B, H), dtype=bool)
    intents = np.array([t.gold_intent for t in turns], dtype=np.int64)

    for i, (turn, pre, bundle) in enumerate(zip(turns, prefix, bundles)):
        n, p = len(turn), len(pre)
        tokens[i, 0] = CLS
        tokens[i, 1:1 + p] = pre
        tokens[i, 1 + p:1 + p + n] = turn.tokens
        attn_mask[i, :1 + p + n] = True
        slot_mask[i, 1 + p:1 + p + n] = True
        slot_targets[i, 1 + p:1 + p + n] = turn.gold_slots
        dec_inputs[i, 0] = bos_id
        dec_inputs[i, 1:n] = turn.gold_slots[:-1]
        dec_targets[i, :n] = turn.gold_slots
        dec_mask[i, :n] = True
        if H:
            h = len(bundle)
            hist_tokens[i, :h] = bundle.tokens
            hist_results[i, :h] = bundle.results
            hist_is_intent[i, :h] = bundle.is_intent
            hist_mask[i, :h] = True
    return Batch(tokens, attn_mask, slot_mask, slot_targets, intents, dec_inputs, dec_targets, dec_mask,
                 hist_tokens, hist_results, hist_is_intent, hist_mask, list(refs))


def make_batches(sessions: Sequence[DialogueSession], batch_size: int, shuffle_seed=None, *, bos_id: int,
                 history_source: str = "gold", cat_all: bool = False) -> list[Batch]:
    """Split every turn of ``sessions`` into batches of ``batch_size``.

    ``shuffle_seed`` may be an int or a ``numpy.random.Generator``; ``None``
    keeps corpus order. Each example carries all earlier turns of its session.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    refs = [(s, t) for s in sessions for t in range(len(s.turns))]
    if not refs:
        raise ConfigError("cannot batch an empty corpus")
    if shuffle_seed is not None:
        rng = shuffle_seed if isinstance(shuffle_seed, np.random.Generator) else np.random.default_rng(shuffle_seed)
        refs = [refs[i] for i in rng.permutation(len(refs))]
    return [build_batch(refs[i:i + batch_size], bos_id, history_source, cat_all)
            for i in range(0, len(refs), batch_size)]

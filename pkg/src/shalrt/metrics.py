"""Intent accuracy, chunk F1, overall accuracy and the uncoordinated-slot error tally."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ContractError, LabelError


class Chunk(NamedTuple):
    slot_type: str
    start: int
    end: int  # inclusive


def _split(label: str) -> tuple[str, str | None]:
    if label == "O":
        return "O", None
    if len(label) > 2 and label[1] == "-" and label[0] in "BI":
        return label[0], label[2:]
    raise LabelError(f"unknown slot label {label!r}")


def extract_chunks(labels: Sequence[str]) -> set[Chunk]:
    """IOB chunks; an ``I-x`` with no open ``x`` chunk starts a new one."""
    chunks = set()
    kind, start = None, 0
    for i, lab in enumerate(labels):
        prefix, typ = _split(lab)
        if prefix == "I" and typ == kind:
            continue
        if kind is not None:
            chunks.add(Chunk(kind, start, i - 1))
        kind, start = typ, i
    if kind is not None:
        chunks.add(Chunk(kind, start, len(labels) - 1))
    return chunks


def _check_aligned(gold, pred) -> None:
    if len(gold) != len(pred):
        raise ContractError(f"{len(gold)} gold utterances vs {len(pred)} predicted")
    for i, (g, p) in enumerate(zip(gold, pred)):
        if len(g) != len(p):
            raise ContractError(f"utterance {i}: {len(g)} gold labels vs {len(p)} predicted")


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def slot_f1(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> tuple[float, float, float]:
    """Micro-averaged exact-span chunk precision, recall and F1."""
    _check_aligned(gold, pred)
    correct = n_gold = n_pred = 0
    for g, p in zip(gold, pred):
        gc, pc = extract_chunks(g), extract_chunks(p)
        correct += len(gc & pc)
        n_gold += len(gc)
        n_pred += len(pc)
    precision = correct / n_pred if n_pred else 0.0
    recall = correct / n_gold if n_gold else 0.0
    return precision, recall, f1_score(precision, recall)


def intent_accuracy(gold: Sequence, pred: Sequence) -> float:
    if len(gold) != len(pred):
        raise ContractError(f"{len(gold)} gold intents vs {len(pred)} predicted")
    if not gold:
        return 0.0
    return sum(g == p for g, p in zip(gold, pred)) / len(gold)


def overall_accuracy(gold_intents, pred_intents, gold_slots, pred_slots) -> float:
    """Share of utterances whose intent and every slot label are right."""
    _check_aligned(gold_slots, pred_slots)
    if len(gold_intents) != len(gold_slots) or len(pred_intents) != len(gold_slots):
        raise ContractError("intent and slot corpora have different sizes")
    if not gold_slots:
        return 0.0
    hits = sum(gi == pi and list(gs) == list(ps)
               for gi, pi, gs, ps in zip(gold_intents, pred_intents, gold_slots, pred_slots))
    return hits / len(gold_slots)


@dataclass
class UncoordinatedCounts:
    slot_errors: int = 0
    unc: int = 0
    bi: int = 0
    ib: int = 0


def uncoordinated_analysis(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> UncoordinatedCounts:
    """Position-wise slot errors plus BI / IB errors over gold chunks of length >= 2.

    BI: the chunk's first tag is right and at least one later tag is wrong.
    IB: the first tag is wrong and every later tag is right.
    """
    _check_aligned(gold, pred)
    out = UncoordinatedCounts()
    for g, p in zip(gold, pred):
        out.slot_errors += sum(a != b for a, b in zip(g, p))
        for chunk in extract_chunks(g):
            if chunk.end == chunk.start:
                continue
            head_ok = g[chunk.start] == p[chunk.start]
            tail_ok = all(g[j] == p[j] for j in range(chunk.start + 1, chunk.end + 1))
            if head_ok and not tail_ok:
                out.bi += 1
            elif not head_ok and tail_ok:
                out.ib += 1
    out.unc = out.bi + out.ib
    return out


# ------------------------------------------------------------------- reports

BUCKETS = ("early", "medium", "late")


def position_bucket(turn: int, n_turns: int) -> str:
    """Turn-index terciles within a dialogue, ceil-split."""
    size = math.ceil(n_turns / 3)
    return BUCKETS[min(turn // size, 2)]


@dataclass
class UtteranceResult:
    id: str
    turn: int
    gold_intent: str
    pred_intent: str
    gold_slots: list[str]
    pred_slots: list[str]
    latency_ms: float = 0.0
    n_turns: int = 1

    def dump(self) -> dict:
        return {"id": self.id, "turn": self.turn, "gold_intent": self.gold_intent, "pred_intent": self.pred_intent,
                "gold_slots": self.gold_slots, "pred_slots": self.pred_slots, "latency_ms": self.latency_ms}


@dataclass
class LatencyStats:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    count: int


def latency_stats(times_ms: Iterable[float]) -> LatencyStats:
    arr = np.asarray(list(times_ms), dtype=np.float64)
    if arr.size == 0:
        return LatencyStats(0.0, 0.0, 0.0, 0)
    return LatencyStats(float(arr.mean()), float(np.percentile(arr, 50)), float(np.percentile(arr, 95)),
                        int(arr.size))


@dataclass
class EvalReport:
    intent_accuracy: float
    slot_precision: float
    slot_recall: float
    slot_f1: float
    overall_accuracy: float
    slot_error_count: int
    unc_errors: int
    bi_errors: int
    ib_errors: int
    position_breakdown: dict = field(default_factory=dict)
    latency: LatencyStats | None = None
    n_utterances: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        lat = d.pop("latency")
        return cls(**d, latency=LatencyStats(**lat) if lat else None)


def _scores(results: Sequence[UtteranceResult]) -> tuple[float, float]:
    gi = [r.gold_intent for r in results]
    pi = [r.pred_intent for r in results]
    return intent_accuracy(gi, pi), slot_f1([r.gold_slots for r in results], [r.pred_slots for r in results])[2]


def evaluate(results: Sequence[UtteranceResult]) -> EvalReport:
    gold_i = [r.gold_intent for r in results]
    pred_i = [r.pred_intent for r in results]
    gold_s = [r.gold_slots for r in results]
    pred_s = [r.pred_slots for r in results]
    p, r, f = slot_f1(gold_s, pred_s)
    unc = uncoordinated_analysis(gold_s, pred_s)
    breakdown = {}
    for bucket in BUCKETS:
        part = [x for x in results if position_bucket(x.turn, x.n_turns) == bucket]
        if part:
            acc, f1 = _scores(part)
            breakdown[bucket] = {"intent_accuracy": acc, "slot_f1": f1, "count": len(part)}
    latency = latency_stats(x.latency_ms for x in results)
    return EvalReport(intent_accuracy(gold_i, pred_i), p, r, f, overall_accuracy(gold_i, pred_i, gold_s, pred_s),
                      unc.slot_errors, unc.unc, unc.bi, unc.ib, breakdown, latency, len(results))


def write_predictions(results: Iterable[UtteranceResult], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.dump()) + "\n")

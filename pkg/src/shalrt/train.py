"""Training loop, session-lockstep evaluation and checkpoint selection."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig
from .data import DialogueSession, LabelSets, Vocab, build_batch, make_batches, record_prediction
from .errors import ConfigError, NumericalError
from .metrics import EvalReport, UtteranceResult, evaluate
from .model import ShaLrt
from .nn.optim import OptimizerState
from .slg import joint_step

log = logging.getLogger(__name__)

EVAL_BATCH = 64


def predict_sessions(model: ShaLrt, sessions: Sequence[DialogueSession], batch_size: int = EVAL_BATCH,
                     history_source: str = "predicted") -> list[tuple[DialogueSession, int, int, np.ndarray]]:
    """Predict every turn, advancing all sessions together one turn index at a time.

    Turn t of a session is predicted only after turns < t were recorded, so
    with ``history_source="predicted"`` the model sees its own earlier outputs.
    """
    for s in sessions:
        s.clear_predictions()
    out = []
    depth = max((len(s.turns) for s in sessions), default=0)
    for t in range(depth):
        refs = [(s, t) for s in sessions if t < len(s.turns)]
        for i in range(0, len(refs), batch_size):
            chunk = refs[i:i + batch_size]
            batch = build_batch(chunk, model.bos_id, history_source, model.cfg.cat_all)
            pred = model.predict(batch)
            for (s, turn), intent, slots in zip(chunk, pred.intents, pred.slots):
                record_prediction(s, turn, int(intent), slots)
                out.append((s, turn, int(intent), slots))
    order = {id(s): k for k, s in enumerate(sessions)}
    out.sort(key=lambda r: (order[id(r[0])], r[1]))
    return out


def run_eval(model: ShaLrt, sessions: Sequence[DialogueSession], labels: LabelSets,
             history_source: str = "predicted") -> list[UtteranceResult]:
    results = []
    for s, t, intent, slots in predict_sessions(model, sessions, history_source=history_source):
        turn = s.turns[t]
        results.append(UtteranceResult(
            s.id, t, labels.intent_labels[turn.gold_intent], labels.intent_labels[intent],
            labels.slot_names(turn.gold_slots), labels.slot_names(slots), 0.0, len(s.turns)))
    return results


def evaluate_model(model: ShaLrt, sessions, labels: LabelSets) -> EvalReport:
    return evaluate(run_eval(model, sessions, labels))


@dataclass
class TrainResult:
    model: ShaLrt
    best: ckpt.Checkpoint
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    steps: int = 0


def make_optimizer(cfg: RunConfig) -> OptimizerState:
    return OptimizerState(cfg.optimizer, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.adam_eps,
                          cfg.weight_decay if cfg.optimizer == "adamw" else 0.0)


def train(cfg: RunConfig, train_sessions: Sequence[DialogueSession], vocab: Vocab, labels: LabelSets,
          dev_sessions: Sequence[DialogueSession] | None = None,
          on_epoch: Callable[[dict], None] | None = None, stop_at: float | None = None) -> TrainResult:
    """Train from scratch; every random draw comes from one generator seeded by ``cfg.seed``.

    The returned checkpoint holds the parameters of the epoch with the best
    validation overall accuracy (the last epoch when no validation set is given).
    ``stop_at`` ends training once validation overall accuracy reaches it.
    """
    cfg.validate()
    if not train_sessions:
        raise ConfigError("training corpus is empty")
    rng = np.random.default_rng(cfg.seed)
    model = ShaLrt(cfg, vocab.size, labels.n_intents, labels.n_slots, rng)
    state = make_optimizer(cfg)
    # until a training turn has been predicted once, its gold labels stand in as history
    source = "gold" if cfg.history_source == "gold" else "predicted_or_gold"
    history, step = [], 0
    best_score, best_epoch = -1.0, 0
    best = ckpt.from_model(model, vocab, labels, meta={"epoch": 0})
    for epoch in range(1, cfg.epochs + 1):
        totals = {"loss": 0.0, "slu_loss": 0.0, "slg_loss": 0.0}
        batches = make_batches(train_sessions, cfg.batch_size, rng, bos_id=model.bos_id, history_source=source,
                               cat_all=cfg.cat_all)
        for batch in batches:
            out = joint_step(model, batch, state, rng, cfg.max_grad_norm)
            step += 1
            loss = float(out.total.data)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at step {step}", step)
            totals["loss"] += loss
            totals["slu_loss"] += float(out.slu_loss.data)
            totals["slg_loss"] += float(out.slg_loss.data) if out.slg_loss is not None else 0.0
        entry = {"epoch": epoch, "step": step, **{k: v / len(batches) for k, v in totals.items()}}
        if cfg.history_source == "predicted":
            predict_sessions(model, train_sessions, history_source="predicted")
        if dev_sessions:
            report = evaluate_model(model, dev_sessions, labels)
            entry.update(dev_intent_accuracy=report.intent_accuracy, dev_slot_f1=report.slot_f1,
                         dev_overall_accuracy=report.overall_accuracy)
            score = report.overall_accuracy
        else:
            score = float(epoch)
        if score > best_score:
            best_score, best_epoch = score, epoch
            best = ckpt.from_model(model, vocab, labels, meta={"epoch": epoch})
        history.append(entry)
        log.info("epoch %d loss %.4f", epoch, entry["loss"])
        if on_epoch:
            on_epoch(entry)
        if stop_at is not None and dev_sessions and score >= stop_at:
            break
    best.optimizer = state if best_epoch == len(history) else None
    model.load_state_dict(best.params)
    return TrainResult(model, best, history, best_epoch, step)

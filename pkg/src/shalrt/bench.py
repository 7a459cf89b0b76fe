"""Single-stream latency measurement: one utterance per forward pass, history pipeline included."""
from __future__ import annotations

import gc
import time
from typing import Callable, Sequence

from .data import DialogueSession, build_batch, record_prediction
from .errors import ConfigError
from .metrics import LatencyStats, latency_stats

WARMUP = 10


def _utterances(sessions: Sequence[DialogueSession]) -> list[tuple[DialogueSession, int]]:
    refs = [(s, t) for s in sessions for t in range(len(s.turns))]
    if not refs:
        raise ConfigError("cannot benchmark an empty corpus")
    return refs


def utterance_runner(model, sessions: Sequence[DialogueSession]) -> Callable[[int], None]:
    """A callable timing-unit: predict utterance ``i`` (cycling the corpus) and record it.

    Sessions are walked in turn order, so history comes from earlier recorded
    predictions exactly as in evaluation.
    """
    refs = _utterances(sessions)

    def run(i: int) -> None:
        s, t = refs[i % len(refs)]
        if t == 0:
            s.clear_predictions()
        batch = build_batch([(s, t)], model.bos_id, "predicted", model.cfg.cat_all)
        pred = model.predict(batch)
        record_prediction(s, t, int(pred.intents[0]), pred.slots[0])

    return run


def _time(fns: Sequence[Callable[[int], None]], repetitions: int, warmup: int) -> list[list[float]]:
    if repetitions < 1:
        raise ConfigError("repetitions must be at least 1")
    for i in range(warmup):
        for fn in fns:
            fn(i)
    times = [[] for _ in fns]
    enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(repetitions):
            # alternate who goes first so slow drifts hit both sides equally
            order = range(len(fns)) if i % 2 == 0 else reversed(range(len(fns)))
            for k in order:
                start = time.perf_counter()
                fns[k](warmup + i)
                times[k].append((time.perf_counter() - start) * 1000.0)
    finally:
        if enabled:
            gc.enable()
    return times


def bench_latency(model, sessions: Sequence[DialogueSession], repetitions: int = 100,
                  warmup: int = WARMUP) -> LatencyStats:
    """Mean / p50 / p95 wall-clock milliseconds per utterance after ``warmup`` discarded runs."""
    (times,) = _time([utterance_runner(model, sessions)], repetitions, warmup)
    return latency_stats(times)


def compare_latency(models: Sequence, sessions: Sequence[DialogueSession], repetitions: int = 100,
                    warmup: int = WARMUP) -> list[LatencyStats]:
    """Interleaved timing of several models on the same utterance stream."""
    import copy

    runners = [utterance_runner(m, copy.deepcopy(list(sessions))) for m in models]
    return [latency_stats(t) for t in _time(runners, repetitions, warmup)]


def overhead_ratio(base: LatencyStats, other: LatencyStats) -> float:
    """Relative mean slowdown of ``other`` over ``base``."""
    return other.mean_ms / base.mean_ms - 1.0

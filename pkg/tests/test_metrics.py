import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_chunks, brute_f1
from shalrt.bench import bench_latency
from shalrt.errors import ConfigError, ContractError, LabelError
from shalrt.metrics import (Chunk, EvalReport, UtteranceResult, evaluate, extract_chunks, intent_accuracy,
                            latency_stats, overall_accuracy, position_bucket, slot_f1, uncoordinated_analysis,
                            write_predictions)

LABELS = ["O", "B-a", "I-a", "B-b", "I-b", "B-c", "I-c"]


def test_chunks_of_navigation_turn():
    labels = "O O O B-distance B-poi_type I-poi_type O".split()
    assert extract_chunks(labels) == {Chunk("distance", 3, 3), Chunk("poi_type", 4, 5)}


def test_all_outside_has_no_chunks():
    assert extract_chunks(["O"] * 4) == set()


def test_bare_inside_opens_chunk():
    assert extract_chunks(["I-city", "I-city"]) == {Chunk("city", 0, 1)}
    assert extract_chunks(["B-a", "I-b"]) == {Chunk("a", 0, 0), Chunk("b", 1, 1)}


def test_unknown_label():
    with pytest.raises(LabelError):
        extract_chunks(["O", "X-city"])


def test_f1_perfect_and_half():
    gold = ["O B-city I-city O B-time I-time".split()]
    assert slot_f1(gold, gold) == (1.0, 1.0, 1.0)
    pred = ["O B-city O O B-time I-time".split()]
    assert slot_f1(gold, pred) == (0.5, 0.5, 0.5)


def test_f1_zero_when_no_span_matches():
    gold = ["O O B-object_type I-object_type B-object_name I-object_name I-object_name".split()]
    pred = ["O O B-object_type B-object_name I-object_name O O".split()]
    assert slot_f1(gold, pred)[2] == 0.0


def test_f1_alignment():
    with pytest.raises(ContractError):
        slot_f1([["O", "O"]], [["O"]])
    with pytest.raises(ContractError):
        slot_f1([["O"]], [])


def test_f1_no_chunks_anywhere():
    assert slot_f1([["O"]], [["O"]]) == (0.0, 0.0, 0.0)


def test_f1_matches_brute_force_on_1000_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        g = list(rng.choice(LABELS, n))
        p = list(rng.choice(LABELS, n))
        assert {tuple(c) for c in extract_chunks(g)} == brute_chunks(g)
        assert slot_f1([g], [p]) == pytest.approx(brute_f1([g], [p]), abs=0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.sampled_from(LABELS), min_size=1, max_size=8), min_size=1, max_size=5), st.data())
def test_corpus_f1_matches_brute_force(gold, data):
    pred = [data.draw(st.lists(st.sampled_from(LABELS), min_size=len(g), max_size=len(g))) for g in gold]
    assert slot_f1(gold, pred) == pytest.approx(brute_f1(gold, pred), abs=1e-15)


def test_overall_accuracy_examples():
    g = [["O", "B-a"], ["B-b"]]
    assert overall_accuracy(["x", "y"], ["x", "y"], g, g) == 1.0
    assert overall_accuracy(["x"], ["x"], [["O", "B-a"]], [["O", "O"]]) == 0.0
    assert overall_accuracy(["x", "y"], ["x", "z"], g, g) == 0.5


def test_intent_accuracy():
    assert intent_accuracy(["a", "b", "c", "a"], ["a", "b", "a", "a"]) == 0.75
    with pytest.raises(ContractError):
        intent_accuracy(["a"], [])


def test_uncoordinated_fixture():
    gold = ["O B-city I-city O B-time I-time".split()]
    pred = ["O B-city I-time O B-city I-time".split()]
    c = uncoordinated_analysis(gold, pred)
    assert (c.bi, c.ib, c.unc, c.slot_errors) == (1, 1, 2, 2)


def test_uncoordinated_clean():
    gold = ["O B-city I-city".split()]
    c = uncoordinated_analysis(gold, gold)
    assert (c.slot_errors, c.unc, c.bi, c.ib) == (0, 0, 0, 0)


def test_fully_wrong_chunk_is_not_uncoordinated():
    c = uncoordinated_analysis([["B-city", "I-city"]], [["O", "O"]])
    assert c.slot_errors == 2 and c.unc == 0


def test_single_token_chunks_are_not_uncoordinated():
    c = uncoordinated_analysis([["B-city", "O"]], [["B-time", "O"]])
    assert c.slot_errors == 1 and c.unc == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.sampled_from(LABELS), min_size=1, max_size=8), min_size=1, max_size=5), st.data())
def test_corpus_invariants(gold, data):
    pred = [data.draw(st.lists(st.sampled_from(LABELS), min_size=len(g), max_size=len(g))) for g in gold]
    gi = data.draw(st.lists(st.sampled_from("xyz"), min_size=len(gold), max_size=len(gold)))
    pi = data.draw(st.lists(st.sampled_from("xyz"), min_size=len(gold), max_size=len(gold)))
    c = uncoordinated_analysis(gold, pred)
    assert c.unc == c.bi + c.ib
    slot_acc = sum(list(g) == list(p) for g, p in zip(gold, pred)) / len(gold)
    assert overall_accuracy(gi, pi, gold, pred) <= min(intent_accuracy(gi, pi), slot_acc)


def test_position_buckets():
    assert [position_bucket(t, 6) for t in range(6)] == ["early"] * 2 + ["medium"] * 2 + ["late"] * 2
    assert [position_bucket(t, 4) for t in range(4)] == ["early", "early", "medium", "medium"]
    assert [position_bucket(t, 7) for t in range(7)] == ["early"] * 3 + ["medium"] * 3 + ["late"]
    assert position_bucket(0, 1) == "early"


def test_latency_stats():
    s = latency_stats([1.0, 2.0, 3.0, 4.0])
    assert (s.mean_ms, s.p50_ms, s.count) == (2.5, 2.5, 4)
    assert latency_stats([]).count == 0


def results():
    return [UtteranceResult("d", 0, "x", "x", ["O", "B-a"], ["O", "B-a"], 1.0, 3),
            UtteranceResult("d", 1, "y", "x", ["B-a", "I-a"], ["B-a", "I-b"], 2.0, 3),
            UtteranceResult("d", 2, "y", "y", ["O"], ["O"], 3.0, 3)]


def test_evaluate_report():
    r = evaluate(results())
    assert r.intent_accuracy == pytest.approx(2 / 3)
    assert r.overall_accuracy == pytest.approx(2 / 3)
    assert (r.bi_errors, r.ib_errors, r.unc_errors, r.slot_error_count) == (1, 0, 1, 1)
    assert set(r.position_breakdown) == {"early", "medium", "late"}
    assert r.position_breakdown["medium"]["intent_accuracy"] == 0.0
    assert r.latency.mean_ms == 2.0 and r.n_utterances == 3
    assert EvalReport.from_json(r.to_json()) == r


def test_write_predictions(tmp_path):
    write_predictions(results(), tmp_path / "p.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "p.jsonl").read_text().splitlines()]
    assert len(rows) == 3
    assert set(rows[0]) == {"id", "turn", "gold_intent", "pred_intent", "gold_slots", "pred_slots", "latency_ms"}


def test_bench_needs_repetitions_and_data():
    from conftest import make_session, tiny_config
    from shalrt.model import ShaLrt

    model = ShaLrt(tiny_config(), 12, 3, 5)
    sessions = [make_session(np.random.default_rng(0), 2)]
    with pytest.raises(ConfigError):
        bench_latency(model, sessions, repetitions=0)
    with pytest.raises(ConfigError):
        bench_latency(model, [], repetitions=1)
    stats = bench_latency(model, sessions, repetitions=2, warmup=1)
    assert stats.count == 2 and stats.mean_ms > 0

import numpy as np
import pytest

from shalrt.config import RunConfig, replace
from shalrt.data import DialogueSession, LabelSets, Turn, Vocab, build_batch

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _criteria[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, title, detail = _criteria[number]
        line = f"criterion {number:2d}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


# ------------------------------------------------------------------ fixtures

SLOTS = ["O", "B-a", "I-a", "B-b", "I-b"]
INTENTS = ["i0", "i1", "i2"]


def tiny_labels() -> LabelSets:
    return LabelSets(list(INTENTS), list(SLOTS))


def make_session(rng: np.random.Generator, n_turns: int, vocab_size: int = 12, max_len: int = 5,
                 sid: str = "s", n_intents: int = 3, n_slots: int = 5) -> DialogueSession:
    turns = []
    for _ in range(n_turns):
        n = int(rng.integers(1, max_len + 1))
        tokens = [int(t) for t in rng.integers(3, vocab_size, size=n)]
        slots = [int(s) for s in rng.integers(0, n_slots, size=n)]
        turns.append(Turn([f"w{t}" for t in tokens], tokens, int(rng.integers(n_intents)), slots))
    return DialogueSession(sid, turns)


def tiny_config(**kw) -> RunConfig:
    base = dict(d_model=8, heads=2, sha_layers=1, encoder_layers=2, lrm_positions="1", decoder_layers=1,
                dropout=0.0, rel_pos_clip=3)
    base.update(kw)
    return replace(RunConfig(), **base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_vocab() -> Vocab:
    return Vocab(f"w{i}" for i in range(3, 12))


@pytest.fixture
def two_turn_batch():
    rng = np.random.default_rng(7)
    s = make_session(rng, 2)
    return build_batch([(s, 1)], bos_id=5)

"""Small generated corpora for tests and demos.

``history_corpus`` builds dialogues whose second-turn labels can only be
resolved from the first turn; ``memorisation_corpus`` builds a fixed set of
dialogues for overfitting checks.
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .data import DialogueSession, LabelSets, Turn, Vocab, write_corpus

FILLER = ["please", "the", "a", "now", "me", "show", "find", "what", "about", "is", "for", "tell", "any", "near"]


def _encode(sessions_raw: list[list[tuple[list[str], list[str], str]]], prefix: str):
    intents = [i for s in sessions_raw for _, _, i in s]
    slots = [lab for s in sessions_raw for _, labs, _ in s for lab in labs]
    labels = LabelSets.from_labels(intents, slots)
    vocab = Vocab()
    sessions = []
    for k, raw in enumerate(sessions_raw):
        turns = [Turn(list(w), [vocab.add(x) for x in w], labels.intent_id(i), [labels.slot_id(x) for x in labs])
                 for w, labs, i in raw]
        sessions.append(DialogueSession(f"{prefix}-{k}", turns))
    return sessions, vocab, labels


def memorisation_corpus(n_dialogues: int = 16, n_intents: int = 3, n_slot_types: int = 8, seed: int = 0,
                        max_turns: int = 3):
    """Dialogues of 1..max_turns turns with slot-typed words and one intent per turn; utterances are unique."""
    rng = np.random.default_rng(seed)
    types = [f"type{k}" for k in range(n_slot_types)]
    type_words = {t: [f"{t}w{j}" for j in range(3)] for t in types}
    intents = [f"intent{k}" for k in range(n_intents)]
    raw = []
    seen = set()
    for _ in range(n_dialogues):
        turns = []
        for _ in range(int(rng.integers(1, max_turns + 1))):
            # resample repeats so no utterance carries two different label sets
            while True:
                words, labs = [], []
                for _ in range(int(rng.integers(1, 3))):
                    words.append(str(rng.choice(FILLER)))
                    labs.append("O")
                    t = str(rng.choice(types))
                    span = int(rng.integers(1, 3))
                    for j in range(span):
                        words.append(str(rng.choice(type_words[t])))
                        labs.append(("B-" if j == 0 else "I-") + t)
                if tuple(words) not in seen:
                    break
            seen.add(tuple(words))
            turns.append((words, labs, str(rng.choice(intents))))
        raw.append(turns)
    return _encode(raw, "mem")


DOMAINS = {
    "restaurant": ("food", ["pizza", "sushi", "curry", "noodles", "tacos", "falafel"]),
    "weather": ("city", ["paris", "tokyo", "lagos", "lima", "oslo", "cairo"]),
}
AMBIGUOUS = ["alpha", "bravo", "delta", "echo", "golf", "hotel"]


def history_corpus(n_dialogues: int = 64, seed: int = 0):
    """Two-turn dialogues; the second turn's slot type is decided by the first turn's domain.

    Turn 1 names a domain-specific word (``B-food`` or ``B-city``). Turn 2
    uses a shared code word that is labelled with the first turn's slot type
    and carries the first turn's intent, so nothing in turn 2 alone
    separates the two readings.
    """
    rng = np.random.default_rng(seed)
    names = sorted(DOMAINS)
    raw = []
    for _ in range(n_dialogues):
        intent = names[int(rng.integers(len(names)))]
        slot, words = DOMAINS[intent]
        first = ["find", str(rng.choice(words)), "please"]
        code = list(rng.choice(AMBIGUOUS, size=int(rng.integers(1, 3)), replace=False))
        second = ["what", "about"] + [str(w) for w in code]
        second_labels = ["O", "O"] + [("B-" if j == 0 else "I-") + slot for j in range(len(code))]
        raw.append([(first, ["O", "B-" + slot, "O"], intent), (second, second_labels, intent)])
    return _encode(raw, "hist")


def write_demo(directory, seed: int = 0) -> dict[str, Path]:
    """Write train/dev/test splits of the history corpus as JSON lines."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, n, offset in (("train", 96, 0), ("dev", 24, 1), ("test", 24, 2)):
        sessions, _, labels = history_corpus(n, seed + offset)
        paths[split] = directory / f"{split}.jsonl"
        write_corpus(sessions, labels, paths[split])
    return paths


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description="write a small generated multi-turn corpus")
    parser.add_argument("directory")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    for split, path in write_demo(args.directory, args.seed).items():
        print(f"{split}: {path}")


if __name__ == "__main__":
    main()

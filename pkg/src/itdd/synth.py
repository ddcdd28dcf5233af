"""Synthetic fact-copy dialogues.

Each conversation owns a document listing ``key value`` facts. Speaker A asks
``what is <key> ?`` and speaker B answers with the value. Values are drawn
uniformly per conversation, so the answer can only be found in the document.

By default only B's turns are grounded in the document (A asks without
seeing it), so the document attached to an answer is new information at the
moment the answer is generated.
"""

from __future__ import annotations

import numpy as np

from .data import Conversation, Turn
from .nn import ConfigError

FIXED_WORDS = ("what", "is", "?", ";")


def fact_pools(vocab_size: int) -> tuple[list[str], list[str]]:
    """Disjoint key and value word pools that fit into ``vocab_size`` words."""
    half = (vocab_size - len(FIXED_WORDS)) // 2
    return [f"k{i}" for i in range(half)], [f"v{i}" for i in range(half)]


def gen_fact_copy_task(
    seed: int,
    n_conversations: int,
    n_facts: int = 4,
    vocab_size: int = 64,
    n_questions: int | None = None,
    asker_sees_document: bool = False,
    shuffle_questions: bool = True,
) -> list[Conversation]:
    if n_facts < 2:
        raise ConfigError(f"n_facts must be >= 2, got {n_facts}")
    keys, values = fact_pools(vocab_size)
    if len(keys) < n_facts or len(values) < 2:
        raise ConfigError(
            f"vocab_size={vocab_size} too small for {n_facts} distinct keys and a disjoint value pool"
        )
    n_questions = n_facts if n_questions is None else n_questions
    rng = np.random.default_rng(seed)
    convs = []
    for _ in range(n_conversations):
        chosen = [keys[i] for i in rng.choice(len(keys), size=n_facts, replace=False)]
        answers = [values[i] for i in rng.integers(0, len(values), size=n_facts)]
        doc = " ; ".join(f"{k} {v}" for k, v in zip(chosen, answers))
        if not shuffle_questions:
            asked = np.arange(n_questions) % n_facts
        elif n_questions <= n_facts:
            asked = rng.permutation(n_facts)[:n_questions]
        else:
            asked = rng.integers(0, n_facts, n_questions)
        turns = []
        for q in asked:
            turns.append(Turn("A", f"what is {chosen[q]} ?", "facts" if asker_sees_document else None))
            turns.append(Turn("B", answers[q], "facts"))
        convs.append(Conversation(turns, {"facts": doc}))
    return convs


def answer_from_document(question: str, document: str) -> str | None:
    """Oracle reader: look the asked key up in the document."""
    words = question.split()
    if len(words) < 3:
        return None
    key = words[2]
    for fact in document.split(";"):
        parts = fact.split()
        if len(parts) == 2 and parts[0] == key:
            return parts[1]
    return None

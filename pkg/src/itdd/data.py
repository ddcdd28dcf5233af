"""Corpus loading, dialogue preprocessing, windowed examples and batching."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .vocab import BOS_TOKEN, EOS_TOKEN, PAD, UNK_TOKEN, Vocab

log = logging.getLogger(__name__)

SPEAKERS = ("A", "B")
MAX_UTT_LEN = 50
MAX_DOC_LEN = 256

_TOKEN_RE = re.compile(r"""[.,!?'":;()]|[^\s.,!?'":;()]+""")


class CorpusError(ValueError):
    """Malformed corpus data."""


@dataclass
class Turn:
    speaker: str
    text: str
    doc: str | None = None


@dataclass
class Conversation:
    turns: list[Turn]
    docs: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        for i, turn in enumerate(self.turns):
            if turn.speaker not in SPEAKERS:
                raise CorpusError(f"turn {i}: speaker {turn.speaker!r} not in {SPEAKERS}")
            if turn.doc is not None and turn.doc not in self.docs:
                raise CorpusError(f"turn {i}: document id {turn.doc!r} not in document store")

    def document(self, turn: Turn) -> str | None:
        return None if turn.doc is None else self.docs.get(turn.doc)

    def to_json(self) -> dict:
        return {
            "turns": [{"speaker": t.speaker, "text": t.text, "doc": t.doc} for t in self.turns],
            "docs": {k: self.docs[k] for k in sorted(self.docs)},
        }

    @classmethod
    def from_json(cls, record: dict) -> "Conversation":
        if not isinstance(record, dict):
            raise CorpusError("record must be a JSON object")
        for key in ("turns", "docs"):
            if key not in record:
                raise CorpusError(f"missing field {key!r}")
        if not isinstance(record["docs"], dict):
            raise CorpusError("field 'docs' must be an object")
        turns = []
        for i, t in enumerate(record["turns"]):
            for key in ("speaker", "text", "doc"):
                if not isinstance(t, dict) or key not in t:
                    raise CorpusError(f"turn {i}: missing field {key!r}")
            turns.append(Turn(str(t["speaker"]), str(t["text"]), None if t["doc"] is None else str(t["doc"])))
        conv = cls(turns, {str(k): str(v) for k, v in record["docs"].items()})
        conv.validate()
        return conv


@dataclass
class TrainingExample:
    """Token-level example: up to ``window`` context turns and the next response."""

    context: list[list[str]]
    context_docs: list[list[str]]
    target: list[str]
    target_doc: list[str]


@dataclass
class EncodedExample:
    context: list[np.ndarray]
    context_docs: list[np.ndarray]
    target: np.ndarray
    target_doc: np.ndarray


@dataclass
class Batch:
    """Padded id arrays; every example in a batch has the same number of turns."""

    utts: list[np.ndarray]
    docs: list[np.ndarray]
    target_doc: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    context_concat: np.ndarray

    @property
    def size(self) -> int:
        return self.tgt_in.shape[0]

    @property
    def n_tokens(self) -> int:
        return int((self.tgt_out != PAD).sum())


def tokenize(text: str) -> list[str]:
    """Lower-case word tokens with punctuation split off."""
    return _TOKEN_RE.findall(text.lower())


def merge_consecutive(conv: Conversation) -> Conversation:
    """Join adjacent turns by the same speaker; the first turn's document wins."""
    merged: list[Turn] = []
    for turn in conv.turns:
        if merged and merged[-1].speaker == turn.speaker:
            merged[-1] = Turn(turn.speaker, f"{merged[-1].text} {turn.text}", merged[-1].doc)
        else:
            merged.append(Turn(turn.speaker, turn.text, turn.doc))
    return Conversation(merged, dict(conv.docs))


def _clip(tokens: list[str], cap: int) -> list[str]:
    tokens = tokens[:cap]
    return tokens if tokens else [UNK_TOKEN]


def make_examples(
    conv: Conversation,
    window: int = 3,
    max_utt_len: int = MAX_UTT_LEN,
    max_doc_len: int = MAX_DOC_LEN,
) -> list[TrainingExample]:
    """One example per response turn, each with the preceding ``window`` turns."""
    turns = conv.turns
    if len(turns) < 2:
        return []
    utts = [_clip(tokenize(t.text), max_utt_len) for t in turns]
    docs = [_clip(tokenize(conv.document(t) or ""), max_doc_len) for t in turns]
    out = []
    for k in range(1, len(turns)):
        lo = max(0, k - window)
        out.append(
            TrainingExample(
                context=[list(u) for u in utts[lo:k]],
                context_docs=[list(d) for d in docs[lo:k]],
                target=[BOS_TOKEN] + utts[k] + [EOS_TOKEN],
                target_doc=list(docs[k]),
            )
        )
    return out


def corpus_examples(convs: Iterable[Conversation], window: int = 3, **caps) -> list[TrainingExample]:
    out = []
    for conv in convs:
        out.extend(make_examples(merge_consecutive(conv), window, **caps))
    return out


def vocab_corpus(examples: Iterable[TrainingExample]) -> Iterator[list[str]]:
    """Token sequences used to count vocabulary (targets and target documents)."""
    for ex in examples:
        yield from ex.context
        yield from ex.context_docs
        yield ex.target
        yield ex.target_doc


def encode_example(ex: TrainingExample, vocab: Vocab) -> EncodedExample:
    enc = lambda toks: np.array(vocab.encode(toks), dtype=np.int64)
    return EncodedExample(
        [enc(u) for u in ex.context],
        [enc(d) for d in ex.context_docs],
        enc(ex.target),
        enc(ex.target_doc),
    )


def pad(seqs: Sequence[np.ndarray], length: int | None = None) -> np.ndarray:
    length = max(len(s) for s in seqs) if length is None else length
    out = np.full((len(seqs), length), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def collate(examples: Sequence[EncodedExample]) -> Batch:
    n_turns = {len(e.context) for e in examples}
    if len(n_turns) != 1:
        raise ValueError(f"batch mixes context sizes {sorted(n_turns)}")
    k = n_turns.pop()
    targets = [e.target for e in examples]
    return Batch(
        utts=[pad([e.context[j] for e in examples]) for j in range(k)],
        docs=[pad([e.context_docs[j] for e in examples]) for j in range(k)],
        target_doc=pad([e.target_doc for e in examples]),
        tgt_in=pad([t[:-1] for t in targets]),
        tgt_out=pad([t[1:] for t in targets]),
        context_concat=pad([np.concatenate(e.context) for e in examples]),
    )


def make_batches(
    examples: Sequence[EncodedExample],
    batch_size: int,
    rng: np.random.Generator | None = None,
) -> list[Batch]:
    """Group by context size, then by target length; shuffle batch order if ``rng``."""
    order = sorted(range(len(examples)), key=lambda i: (len(examples[i].context), len(examples[i].target), i))
    groups: list[list[int]] = []
    for i in order:
        if groups and len(groups[-1]) < batch_size and len(examples[groups[-1][0]].context) == len(examples[i].context):
            groups[-1].append(i)
        else:
            groups.append([i])
    if rng is not None:
        groups = [groups[j] for j in rng.permutation(len(groups))]
    return [collate([examples[i] for i in g]) for g in groups]


# ----------------------------------------------------------------------------
# JSONL corpus


def load_corpus(path: str | Path) -> list[Conversation]:
    path = Path(path)
    convs = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            try:
                convs.append(Conversation.from_json(record))
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
    if not convs:
        log.warning("corpus %s is empty", path)
    else:
        n_turns = sum(len(c.turns) for c in convs)
        log.info("loaded %d conversations (%d utterances) from %s", len(convs), n_turns, path)
    return convs


def dumps_conversation(conv: Conversation) -> str:
    return json.dumps(conv.to_json(), ensure_ascii=False)


def write_corpus(convs: Iterable[Conversation], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for conv in convs:
            fh.write(dumps_conversation(conv) + "\n")

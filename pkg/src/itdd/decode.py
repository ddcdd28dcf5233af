"""Beam search and two-pass response generation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Conversation, Turn, tokenize
from .model import ContextState, ITDDModel, Memory
from .tensor import Tensor
from .vocab import BOS, EOS, PAD, UNK_TOKEN, Vocab

DEFAULT_BEAM = 5
DEFAULT_MAX_LEN = 30

StepFn = Callable[[list[list[int]]], np.ndarray]


@dataclass
class BeamHypothesis:
    tokens: list[int]
    logp: float = 0.0
    finished: bool = False

    @property
    def output(self) -> list[int]:
        """Tokens after the leading BOS."""
        return self.tokens[1:]


def beam_search(step: StepFn, beam: int = DEFAULT_BEAM, max_len: int = DEFAULT_MAX_LEN,
                bos: int = BOS, eos: int | None = EOS) -> BeamHypothesis:
    """Length-unnormalised beam search over summed log-probabilities.

    ``step`` maps a list of prefixes (each starting with ``bos``) to an
    ``[n, V]`` array of next-token log-probabilities. Candidates are ranked by
    score, then lower token id, then earlier hypothesis. Hypotheses ending in
    ``eos`` retire to a pool; the pool's best is returned, otherwise the best
    live hypothesis after ``max_len`` steps.
    """
    if beam < 1 or max_len < 1:
        raise ValueError(f"beam and max_len must be >= 1, got {beam}, {max_len}")
    live = [BeamHypothesis([bos])]
    pool: list[BeamHypothesis] = []
    for _ in range(max_len):
        logp = np.asarray(step([h.tokens for h in live]), dtype=np.float64)
        n, vocab = logp.shape
        scores = np.array([h.logp for h in live])[:, None] + logp
        flat = scores.reshape(-1)
        hyp_idx = np.repeat(np.arange(n), vocab)
        tok_idx = np.tile(np.arange(vocab), n)
        order = np.lexsort((hyp_idx, tok_idx, -flat))
        survivors = []
        for j in order:
            if len(survivors) == beam or flat[j] == -np.inf:
                break
            survivors.append(j)
        nxt = []
        for j in survivors:
            h, v = int(hyp_idx[j]), int(tok_idx[j])
            cand = BeamHypothesis(live[h].tokens + [v], float(flat[j]), eos is not None and v == eos)
            (pool if cand.finished else nxt).append(cand)
        live = nxt
        if not live:
            break
        if pool and max(p.logp for p in pool) >= max(h.logp for h in live):
            break
    if pool:
        return max(pool, key=lambda h: h.logp)
    return max(live, key=lambda h: h.logp)


def greedy_search(step: StepFn, max_len: int = DEFAULT_MAX_LEN, bos: int = BOS, eos: int | None = EOS) -> BeamHypothesis:
    hyp = BeamHypothesis([bos])
    for _ in range(max_len):
        lp = np.asarray(step([hyp.tokens]))[0]
        v = int(np.argmax(lp))
        hyp = BeamHypothesis(hyp.tokens + [v], hyp.logp + float(lp[v]), eos is not None and v == eos)
        if hyp.finished:
            break
    return hyp


# ----------------------------------------------------------------------------
# model-backed decoding


def _tile(mem: Memory, n: int) -> Memory:
    return Memory(Tensor(np.repeat(mem.states.data, n, axis=0)), np.repeat(mem.mask, n, axis=0))


def _tile_state(ctx: ContextState, n: int) -> ContextState:
    return ContextState(Tensor(np.repeat(ctx.states.data, n, axis=0)), np.repeat(ctx.mask, n, axis=0))


def _next_token_logp(logits: Tensor) -> np.ndarray:
    last = logits.data[:, -1, :]
    shifted = last - last.max(axis=-1, keepdims=True)
    lp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    lp[:, PAD] = -np.inf
    lp[:, BOS] = -np.inf
    return lp


def _decoder_step(decode: Callable[[np.ndarray, int], Tensor]) -> StepFn:
    def step(prefixes: list[list[int]]) -> np.ndarray:
        ids = np.array(prefixes, dtype=np.int64)
        return _next_token_logp(decode(ids, len(prefixes)))

    return step


@dataclass
class Response:
    first_pass: list[int]
    final: list[int]
    first_text: str = ""
    final_text: str = ""

    def diff(self) -> list[tuple[str, str]]:
        """Aligned (first, final) token pairs that differ; '' pads the shorter side."""
        a, b = self.first_text.split(), self.final_text.split()
        out = []
        for i in range(max(len(a), len(b))):
            x = a[i] if i < len(a) else ""
            y = b[i] if i < len(b) else ""
            if x != y:
                out.append((x, y))
        return out


def respond_ids(model: ITDDModel, context: Sequence[Sequence[int]], docs: Sequence[Sequence[int]],
                next_doc: Sequence[int], beam: int = DEFAULT_BEAM,
                max_len: int = DEFAULT_MAX_LEN) -> tuple[list[int], list[int]]:
    """Decode a reply from id sequences; returns (first-pass ids, final ids), EOS included."""
    with T.no_grad():
        ctx_ids = [np.asarray(u, dtype=np.int64)[None] for u in context]
        doc_ids = [np.asarray(d, dtype=np.int64)[None] for d in docs]
        doc_next = model.sa_encode(np.asarray(next_doc, dtype=np.int64)[None], "document")
        if model.variant == "KAT":
            enc = model.encode_concatenated(np.concatenate(ctx_ids, axis=1), model.sa_encode(doc_ids[-1], "document"))
            step = _decoder_step(lambda ids, n: model.decode_kat(ids, _tile(enc, n)))
            out = beam_search(step, beam, max_len).output
            return out, out
        ctx = model.encode_dialogue(ctx_ids, doc_ids)
        if model.variant == "ITE+CKAD":
            step = _decoder_step(
                lambda ids, n: model.decode_ckad(ids, _tile_state(ctx, n), _tile(doc_next, n))
            )
            out = beam_search(step, beam, max_len).output
            return out, out
        last = model.sa_encode(ctx_ids[-1], "utterance")
        step1 = _decoder_step(
            lambda ids, n: model.decode_first_pass(ids, _tile_state(ctx, n), _tile(last, n))
        )
        first = beam_search(step1, beam, max_len).output
        draft = np.array([first if first else [EOS]], dtype=np.int64)
        step2 = _decoder_step(lambda ids, n: model.decode_second_pass(ids, np.repeat(draft, n, axis=0), _tile(doc_next, n)))
        final = beam_search(step2, beam, max_len).output
        return first, final


def _prepare(vocab: Vocab, texts: Sequence[str], cap: int) -> list[list[int]]:
    out = []
    for text in texts:
        toks = tokenize(text)[:cap] or [UNK_TOKEN]
        out.append(vocab.encode(toks))
    return out


def respond(model: ITDDModel, vocab: Vocab, context: Sequence[str], docs: Sequence[str | None],
            next_doc: str | None, beam: int = DEFAULT_BEAM, max_len: int = DEFAULT_MAX_LEN) -> Response:
    """Two-pass reply to raw text context; both passes are returned."""
    cfg = model.config
    context = list(context)[-cfg.window:]
    docs = list(docs)[-cfg.window:]
    ctx = _prepare(vocab, context, cfg.max_utt_len)
    dcs = _prepare(vocab, [d or "" for d in docs], cfg.max_doc_len)
    nxt = _prepare(vocab, [next_doc or ""], cfg.max_doc_len)[0]
    first, final = respond_ids(model, ctx, dcs, nxt, beam, max_len)
    return Response(first, final, " ".join(vocab.decode(first)), " ".join(vocab.decode(final)))


class ChatSession:
    """Rolling dialogue window; the user speaks as ``A``, the model as ``B``."""

    def __init__(self, model: ITDDModel, vocab: Vocab, document: str = "", beam: int = DEFAULT_BEAM,
                 max_len: int = DEFAULT_MAX_LEN):
        self.model = model
        self.vocab = vocab
        self.document = document
        self.beam = beam
        self.max_len = max_len
        self.turns: list[Turn] = []
        self.history: list[Turn] = []
        self.docs: dict[str, str] = {}

    @property
    def window(self) -> int:
        return self.model.config.window

    def _doc_id(self, text: str) -> str:
        for key, value in self.docs.items():
            if value == text:
                return key
        key = f"doc{len(self.docs)}"
        self.docs[key] = text
        return key

    def add_turn(self, speaker: str, text: str) -> None:
        turn = Turn(speaker, text, self._doc_id(self.document))
        self.turns.append(turn)
        self.history.append(turn)

    def set_document(self, text: str) -> None:
        self.document = text

    def reset(self) -> None:
        self.turns = []

    def visible_turns(self) -> list[Turn]:
        return self.turns[-self.window:]

    def context_state(self) -> ContextState:
        turns = self.visible_turns()
        if not turns:
            return ContextState.empty()
        cfg = self.model.config
        utts = _prepare(self.vocab, [t.text for t in turns], cfg.max_utt_len)
        docs = _prepare(self.vocab, [self.docs[t.doc] for t in turns], cfg.max_doc_len)
        with T.no_grad():
            return self.model.encode_dialogue([np.array(u)[None] for u in utts], [np.array(d)[None] for d in docs])

    def reply(self, user_text: str) -> Response:
        self.add_turn("A", user_text)
        turns = self.visible_turns()
        resp = respond(self.model, self.vocab, [t.text for t in turns], [self.docs[t.doc] for t in turns],
                       self.document, self.beam, self.max_len)
        self.add_turn("B", resp.final_text)
        return resp

    def transcript(self) -> Conversation:
        """Every turn of the session, including those before a reset."""
        used = {t.doc for t in self.history}
        return Conversation([Turn(t.speaker, t.text, t.doc) for t in self.history],
                            {k: v for k, v in self.docs.items() if k in used})

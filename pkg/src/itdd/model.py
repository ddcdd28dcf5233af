"""Incremental Transformer encoder with a two-pass deliberation decoder.

Three variants share one interface:

* ``ITE+DD``   incremental encoder, first pass attends to the context state and
  the last utterance, second pass attends to the next document and the
  re-encoded first-pass draft.
* ``ITE+CKAD`` incremental encoder, single decoder attending to the context
  state and the next document.
* ``KAT``      the context utterances are concatenated and encoded by layers
  without context attention; the decoder attends to that encoding only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import (
    ConfigError,
    Embedding,
    FeedForward,
    LayerNorm,
    Module,
    MultiHeadAttention,
    sublayer,
    uniform,
    zeros,
)
from .tensor import Tensor
from .vocab import BOS, PAD

ITE_DD = "ITE+DD"
ITE_CKAD = "ITE+CKAD"
KAT = "KAT"
VARIANTS = (ITE_DD, ITE_CKAD, KAT)


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 512
    heads: int = 8
    d_ff: int = 2048
    n_x: int = 3
    n_u: int = 3
    n_y: int = 3
    window: int = 3
    variant: str = ITE_DD
    max_doc_len: int = 256
    max_utt_len: int = 50
    dropout: float = 0.0
    tie_output: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "heads", "d_ff", "n_x", "n_u", "n_y", "window",
                     "max_doc_len", "max_utt_len"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.d_model % 2:
            raise ConfigError(f"d_model must be even for positional encoding, got {self.d_model}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class Memory:
    """Encoded sequence used as attention keys/values, with its padding mask."""

    states: Tensor
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)


@dataclass
class ContextState:
    """Per-token encoding of the latest utterance; ``states is None`` is c^(0)."""

    states: Tensor | None = None
    mask: np.ndarray | None = None

    @classmethod
    def empty(cls) -> "ContextState":
        return cls()

    @property
    def is_empty(self) -> bool:
        return self.states is None

    @property
    def lengths(self) -> np.ndarray:
        if self.mask is None:
            return np.zeros(0, dtype=np.int64)
        return self.mask.sum(axis=-1)

    def as_memory(self) -> Memory | None:
        return None if self.is_empty else Memory(self.states, self.mask)


@dataclass
class ModelOutput:
    logits1: Tensor
    logits2: Tensor | None = None
    draft: np.ndarray | None = None

    @property
    def final(self) -> Tensor:
        return self.logits1 if self.logits2 is None else self.logits2


def _ids2d(ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise T.DimensionError(f"token ids must be [len] or [B, len], got shape {ids.shape}")
    return ids


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


class Layer(Module):
    """Self-attention, then one attention sublayer per named memory, then FFN.

    A memory passed as ``None`` bypasses its sublayer entirely (the residual
    stream passes through unchanged).
    """

    def __init__(self, d_model: int, heads: int, d_ff: int, cross: Sequence[str], rng):
        self.self_attn = MultiHeadAttention(d_model, heads, rng)
        self.self_norm = LayerNorm(d_model)
        self.cross = {name: MultiHeadAttention(d_model, heads, rng) for name in cross}
        self.cross_norm = {name: LayerNorm(d_model) for name in cross}
        self.ffn = FeedForward(d_model, d_ff, rng)
        self.ffn_norm = LayerNorm(d_model)
        self.dropout = None

    def _wrap(self, f):
        if self.dropout is None:
            return f
        return lambda h: self.dropout(f(h))

    def __call__(self, x: Tensor, self_mask: np.ndarray, memories: dict[str, Memory | None]) -> Tensor:
        x = sublayer(x, self._wrap(lambda h: self.self_attn(h, h, h, self_mask)), self.self_norm)
        for name, attn in self.cross.items():
            if name not in memories:
                raise KeyError(f"layer expects memory {name!r}")
            mem = memories[name]
            if mem is None:
                continue
            mask = mem.mask[:, None, :]
            x = sublayer(x, self._wrap(lambda h: attn(h, mem.states, mem.states, mask)), self.cross_norm[name])
        return sublayer(x, self._wrap(self.ffn), self.ffn_norm)


def _stack(n: int, cfg: ModelConfig, cross: Sequence[str], rng) -> list[Layer]:
    return [Layer(cfg.d_model, cfg.heads, cfg.d_ff, cross, rng) for _ in range(n)]


def run_stack(layers: Sequence[Layer], x: Tensor, self_mask, memories) -> Tensor:
    for layer in layers:
        x = layer(x, self_mask, memories)
    return x


def layer_parameter_count(d_model: int, d_ff: int, n_cross: int) -> int:
    attention = 4 * d_model * d_model + 2 * d_model
    ffn = 2 * d_model * d_ff + d_ff + d_model + 2 * d_model
    return (1 + n_cross) * attention + ffn


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for ``cfg``."""
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    sa = cfg.n_x * layer_parameter_count(d, f, 0)
    total = v * d + (v if cfg.tie_output else d * v + v)
    if cfg.variant == ITE_DD:
        total += 2 * sa + cfg.n_u * layer_parameter_count(d, f, 2) + 2 * cfg.n_y * layer_parameter_count(d, f, 2)
    elif cfg.variant == ITE_CKAD:
        total += sa + cfg.n_u * layer_parameter_count(d, f, 2) + cfg.n_y * layer_parameter_count(d, f, 2)
    else:
        total += sa + cfg.n_u * layer_parameter_count(d, f, 1) + cfg.n_y * layer_parameter_count(d, f, 1)
    return total


class ITDDModel(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed) if rng is None else rng
        self.embedding = Embedding(config.vocab_size, config.d_model, rng)
        self.sa_s = _stack(config.n_x, config, (), rng)
        if config.variant == ITE_DD:
            self.sa_u = _stack(config.n_x, config, (), rng)
        if config.variant in (ITE_DD, ITE_CKAD):
            self.ite = _stack(config.n_u, config, ("knowledge", "context"), rng)
        else:
            self.kat_encoder = _stack(config.n_u, config, ("knowledge",), rng)
        if config.variant == ITE_DD:
            self.decoder1 = _stack(config.n_y, config, ("context", "utterance"), rng)
            self.decoder2 = _stack(config.n_y, config, ("knowledge", "draft"), rng)
        elif config.variant == ITE_CKAD:
            self.decoder = _stack(config.n_y, config, ("context", "knowledge"), rng)
        else:
            self.decoder = _stack(config.n_y, config, ("memory",), rng)
        if not config.tie_output:
            self.out_w = uniform(rng, (config.d_model, config.vocab_size))
        self.out_b = zeros(config.vocab_size)

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def two_pass(self) -> bool:
        return self.config.variant == ITE_DD

    def layers(self) -> list[Layer]:
        out = []
        for value in vars(self).values():
            if isinstance(value, list):
                out.extend(v for v in value if isinstance(v, Layer))
        return out

    def set_training(self, rng: np.random.Generator | None) -> None:
        """Enable dropout with ``rng`` (or disable it with ``None``)."""
        p = self.config.dropout
        fn = None if rng is None or p == 0.0 else (lambda t: T.dropout(t, p, rng))
        for layer in self.layers():
            layer.dropout = fn

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    # -- encoders ----------------------------------------------------------

    def sa_encode(self, ids, which: str = "document") -> Memory:
        """Self-attentive encoding; ``which`` selects the document or utterance stack."""
        ids = _ids2d(ids)
        if ids.shape[1] == 0:
            raise ValueError("cannot encode an empty sequence")
        if which == "document":
            layers = self.sa_s
        elif which == "utterance":
            if not hasattr(self, "sa_u"):
                raise ConfigError(f"variant {self.variant} has no utterance encoder")
            layers = self.sa_u
        else:
            raise ValueError(f"unknown encoder {which!r}")
        mask = ids != PAD
        x = self.embedding(ids)
        return Memory(run_stack(layers, x, mask[:, None, :], {}), mask)

    def encode_incremental(self, prev: ContextState, doc: Memory, utterance) -> ContextState:
        """One step of the incremental recursion: c^(k) from c^(k-1), d^(k), u^(k)."""
        if not hasattr(self, "ite"):
            raise ConfigError(f"variant {self.variant} has no incremental encoder")
        ids = _ids2d(utterance)
        if ids.shape[1] == 0:
            raise ValueError("cannot encode an empty utterance")
        mask = ids != PAD
        x = self.embedding(ids)
        memories = {"knowledge": doc, "context": prev.as_memory()}
        return ContextState(run_stack(self.ite, x, mask[:, None, :], memories), mask)

    def encode_dialogue(self, utterances: Sequence, documents: Sequence) -> ContextState:
        if len(utterances) != len(documents):
            raise ConfigError(
                f"{len(utterances)} utterances but {len(documents)} documents; each turn needs one document"
            )
        if not utterances:
            raise ConfigError("encode_dialogue needs at least one turn")
        state = ContextState.empty()
        for utt, doc in zip(utterances, documents):
            state = self.encode_incremental(state, self.sa_encode(doc, "document"), utt)
        return state

    def encode_concatenated(self, context, doc: Memory) -> Memory:
        """Encoder for the KAT variant: one sequence, no context attention."""
        if not hasattr(self, "kat_encoder"):
            raise ConfigError(f"variant {self.variant} has no concatenated-context encoder")
        ids = _ids2d(context)
        if ids.shape[1] == 0:
            raise ValueError("cannot encode an empty context")
        mask = ids != PAD
        x = self.embedding(ids)
        return Memory(run_stack(self.kat_encoder, x, mask[:, None, :], {"knowledge": doc}), mask)

    # -- decoders ----------------------------------------------------------

    def _decode(self, layers, prefix, memories) -> Tensor:
        ids = _ids2d(prefix)
        if ids.shape[1] == 0:
            raise ValueError("decoder prefix is empty; it must start with BOS")
        valid = ids != PAD
        self_mask = valid[:, None, :] & causal_mask(ids.shape[1])[None]
        h = run_stack(layers, self.embedding(ids), self_mask, memories)
        return self.project(h)

    def project(self, h: Tensor) -> Tensor:
        w = self.out_w if not self.config.tie_output else T.transpose(self.embedding.table)
        return T.add(T.matmul(h, w), self.out_b)

    def decode_first_pass(self, prefix, ctx: ContextState, last_utterance: Memory) -> Tensor:
        if ctx.is_empty:
            raise ValueError("first-pass decoding needs a non-empty context state")
        return self._decode(self.decoder1, prefix, {"context": ctx.as_memory(), "utterance": last_utterance})

    def decode_second_pass(self, prefix, draft, doc_next: Memory) -> Tensor:
        draft = _ids2d(draft)
        if draft.shape[1] == 0 or not (draft != PAD).any(axis=1).all():
            raise ValueError("second pass needs a non-empty first-pass sequence")
        draft_mem = self.sa_encode(draft, "utterance")
        return self._decode(self.decoder2, prefix, {"knowledge": doc_next, "draft": draft_mem})

    def decode_ckad(self, prefix, ctx: ContextState, doc_next: Memory) -> Tensor:
        return self._decode(self.decoder, prefix, {"context": ctx.as_memory(), "knowledge": doc_next})

    def decode_kat(self, prefix, encoded: Memory) -> Tensor:
        return self._decode(self.decoder, prefix, {"memory": encoded})

    # -- full forward ------------------------------------------------------

    def forward(self, batch, draft: np.ndarray | None = None) -> ModelOutput:
        """Teacher-forced logits for a collated batch.

        For ``ITE+DD`` the second pass reads ``draft``; when not given it is the
        per-position argmax of the first pass (a constant, no gradient flows
        through the choice).
        """
        if self.variant == KAT:
            doc = self.sa_encode(batch.docs[-1], "document")
            encoded = self.encode_concatenated(batch.context_concat, doc)
            return ModelOutput(self.decode_kat(batch.tgt_in, encoded))
        ctx = self.encode_dialogue(batch.utts, batch.docs)
        doc_next = self.sa_encode(batch.target_doc, "document")
        if self.variant == ITE_CKAD:
            return ModelOutput(self.decode_ckad(batch.tgt_in, ctx, doc_next))
        last = self.sa_encode(batch.utts[-1], "utterance")
        logits1 = self.decode_first_pass(batch.tgt_in, ctx, last)
        if draft is None:
            draft = draft_tokens(logits1, batch.tgt_out)
        logits2 = self.decode_second_pass(batch.tgt_in, draft, doc_next)
        return ModelOutput(logits1, logits2, draft)

    __call__ = forward


def draft_tokens(logits: Tensor, gold: np.ndarray) -> np.ndarray:
    """Argmax per target position (PAD and BOS excluded), PAD where gold is PAD."""
    scores = logits.data.copy()
    scores[..., PAD] = -np.inf
    scores[..., BOS] = -np.inf
    draft = scores.argmax(axis=-1)
    gold = _ids2d(gold)
    return np.where(gold != PAD, draft, PAD).astype(np.int64)

"""Transformer building blocks on top of :mod:`itdd.tensor`."""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_BIAS = -1e9
INIT_RANGE = 0.08


class ConfigError(ValueError):
    """Invalid model or block configuration."""


class DegenerateMaskError(ValueError):
    """An attention query row has no permitted key."""


class ContractError(RuntimeError):
    """A block violated its shape contract."""


class Module:
    """Parameter container; attribute order defines stable parameter paths."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{key}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


def uniform(rng: np.random.Generator, shape) -> Tensor:
    return T.parameter(rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape))


def zeros(shape) -> Tensor:
    return T.parameter(np.zeros(shape))


def ones(shape) -> Tensor:
    return T.parameter(np.ones(shape))


class LayerNorm(Module):
    def __init__(self, d_model: int):
        self.gain = ones(d_model)
        self.bias = zeros(d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    """Position-wise ``relu(x W1 + b1) W2 + b2``."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.w1 = uniform(rng, (d_model, d_ff))
        self.b1 = zeros(d_ff)
        self.w2 = uniform(rng, (d_ff, d_model))
        self.b2 = zeros(d_model)

    def __call__(self, x: Tensor) -> Tensor:
        hidden = T.relu(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(hidden, self.w2), self.b2)


def attention_bias(mask: np.ndarray | None) -> np.ndarray | None:
    """Additive bias for a boolean permit-mask; raises on fully masked rows."""
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] == 0 or not mask.any(axis=-1).all():
        raise DegenerateMaskError("attention mask leaves a query row with no permitted key")
    return np.where(mask, 0.0, MASK_BIAS)


def multi_head_attention(
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    heads: int,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention split over ``heads``.

    Inputs are ``[q, d]`` / ``[m, d]`` or batched ``[B, q, d]`` / ``[B, m, d]``.
    ``mask`` is a boolean permit-mask broadcastable to ``[B, q, m]``.
    """
    unbatched = q_in.ndim == 2
    if unbatched:
        q_in, k_in, v_in = (T.reshape(t, (1,) + t.shape) for t in (q_in, k_in, v_in))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)[None]
    if k_in.shape[:2] != v_in.shape[:2]:
        raise T.DimensionError(f"keys {k_in.shape} and values {v_in.shape} differ in length")
    b, q, d = q_in.shape
    m = k_in.shape[1]
    if d % heads:
        raise ConfigError(f"d_model={d} not divisible by heads={heads}")
    dk = d // heads
    bias = attention_bias(None if mask is None else np.broadcast_to(mask, (b, q, m)))

    qh = T.transpose(T.reshape(T.matmul(q_in, w_q), (b, q, heads, dk)), (0, 2, 1, 3))
    kh = T.transpose(T.reshape(T.matmul(k_in, w_k), (b, m, heads, dk)), (0, 2, 3, 1))
    vh = T.transpose(T.reshape(T.matmul(v_in, w_v), (b, m, heads, dk)), (0, 2, 1, 3))
    scores = T.scale(T.matmul(qh, kh), 1.0 / math.sqrt(dk))
    if bias is not None:
        scores = T.add(scores, Tensor(bias[:, None, :, :]))
    weights = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(weights, vh), (0, 2, 1, 3)), (b, q, d))
    out = T.matmul(ctx, w_o)
    if unbatched:
        out = T.reshape(out, (q, d))
    return out


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ConfigError(f"d_model={d_model} not divisible by heads={heads}")
        self.heads = heads
        self.d_model = d_model
        self.w_q = uniform(rng, (d_model, d_model))
        self.w_k = uniform(rng, (d_model, d_model))
        self.w_v = uniform(rng, (d_model, d_model))
        self.w_o = uniform(rng, (d_model, d_model))

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    def __call__(self, query: Tensor, key: Tensor, value: Tensor, mask=None) -> Tensor:
        return multi_head_attention(
            query, key, value, self.w_q, self.w_k, self.w_v, self.w_o, self.heads, mask
        )


def sublayer(x: Tensor, f: Callable[[Tensor], Tensor], norm: LayerNorm) -> Tensor:
    """Post-norm residual wrapper: ``norm(x + f(x))``."""
    y = f(x)
    if y.shape != x.shape:
        raise ContractError(f"sublayer function changed shape {x.shape} -> {y.shape}")
    return norm(T.add(x, y))


@lru_cache(maxsize=64)
def _pe_table(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / d_model)
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    table.flags.writeable = False
    return table


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding: sin on even dims, cos on odd dims."""
    if d_model % 2:
        raise ConfigError(f"positional encoding needs an even d_model, got {d_model}")
    return _pe_table(int(length), int(d_model))


class Embedding(Module):
    """Token table shared by utterances, documents and responses."""

    def __init__(self, vocab_size: int, d_model: int, rng: np.random.Generator):
        self.table = uniform(rng, (vocab_size, d_model))

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    def __call__(self, ids) -> Tensor:
        return embed_sequence(ids, self.table)


def embed_sequence(ids, table: Tensor) -> Tensor:
    """Embeddings plus positional encoding; ``ids`` is ``[len]`` or ``[B, len]``."""
    ids = np.asarray(ids, dtype=np.int64)
    d_model = table.shape[1]
    length = ids.shape[-1]
    if length == 0:
        return Tensor(np.zeros(ids.shape + (d_model,)))
    pe = positional_encoding(length, d_model)
    return T.add(T.embedding_gather(table, ids), Tensor(pe))

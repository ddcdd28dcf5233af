"""Finite-difference checks for every tensor op and for tiny full models."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import nn
from . import tensor as T
from .data import EncodedExample, collate
from .model import VARIANTS, ITDDModel, ModelConfig
from .tensor import GradCheckReport, Tensor, grad_check
from .train import batch_loss

TINY = dict(vocab_size=11, d_model=8, heads=2, d_ff=16, n_x=1, n_u=1, n_y=1, window=3)


def _weights(rng, shape) -> Tensor:
    # fixed random projection so every output coordinate reaches the loss
    return Tensor(rng.normal(size=shape))


def _loss(out: Tensor, w: Tensor) -> Tensor:
    return T.reduce_sum(T.mul(out, w))


def op_cases(seed: int = 0) -> Iterator[tuple[str, Callable[[], Tensor], dict[str, Tensor]]]:
    """(name, scalar function, inputs) for each differentiable op."""
    rng = np.random.default_rng(seed)
    r = lambda *s: Tensor(rng.normal(size=s))
    # keep relu inputs away from the kink
    away = lambda *s: Tensor(np.sign(x := rng.normal(size=s)) * (np.abs(x) + 0.1))

    a, b = r(3, 4), r(3, 4)
    w = _weights(rng, (3, 4))
    yield "add", lambda: _loss(T.add(a, b), w), {"a": a, "b": b}
    bb = r(4)
    yield "add_broadcast", lambda: _loss(T.add(a, bb), w), {"a": a, "b": bb}
    yield "sub", lambda: _loss(T.sub(a, b), w), {"a": a, "b": b}
    yield "mul", lambda: _loss(T.mul(a, b), w), {"a": a, "b": b}
    yield "scale", lambda: _loss(T.scale(a, -1.7), w), {"a": a}
    ra = away(3, 4)
    yield "relu", lambda: _loss(T.relu(ra), w), {"a": ra}
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)))
    yield "log", lambda: _loss(T.log(pos), w), {"a": pos}
    yield "exp", lambda: _loss(T.exp(a), w), {"a": a}
    drng_seed = int(rng.integers(1 << 31))
    yield "dropout", lambda: _loss(T.dropout(a, 0.3, np.random.default_rng(drng_seed)), w), {"a": a}

    m1, m2 = r(2, 3, 4), r(2, 4, 5)
    wm = _weights(rng, (2, 3, 5))
    yield "matmul_batched", lambda: _loss(T.matmul(m1, m2), wm), {"a": m1, "b": m2}
    m3 = r(4, 5)
    yield "matmul_broadcast", lambda: _loss(T.matmul(m1, m3), wm), {"a": m1, "b": m3}

    c = r(2, 3, 4)
    wr = _weights(rng, (6, 4))
    yield "reshape", lambda: _loss(T.reshape(c, (6, 4)), wr), {"a": c}
    wt = _weights(rng, (4, 2, 3))
    yield "transpose", lambda: _loss(T.transpose(c, (2, 0, 1)), wt), {"a": c}
    d = r(2, 2, 4)
    wc = _weights(rng, (2, 5, 4))
    yield "concat", lambda: _loss(T.concat([c, d], axis=1), wc), {"a": c, "b": d}
    ws = _weights(rng, (2, 2, 2))
    yield "slice", lambda: _loss(T.slice_(c, (slice(None), slice(1, 3), slice(0, 4, 2))), ws), {"a": c}
    wsum = _weights(rng, (2, 4))
    yield "reduce_sum", lambda: _loss(T.reduce_sum(c, axis=1), wsum), {"a": c}

    table = r(7, 4)
    ids = np.array([[1, 3, 3], [0, 6, 1]])
    we = _weights(rng, (2, 3, 4))
    yield "embedding_gather", lambda: _loss(T.embedding_gather(table, ids), we), {"table": table}
    picks = np.array([[0, 3, 1], [2, 2, 0]])
    wp = _weights(rng, (2, 3))
    yield "pick", lambda: _loss(T.pick(c, picks), wp), {"a": c}
    wsm = _weights(rng, (2, 3, 4))
    yield "softmax", lambda: _loss(T.softmax(c, axis=-1), wsm), {"a": c}
    wl = _weights(rng, (2, 3, 4))
    yield "log_softmax", lambda: _loss(T.log_softmax(c, axis=-1), wl), {"a": c}
    gain, bias = r(4), r(4)
    wn = _weights(rng, (2, 3, 4))
    yield "layer_norm", lambda: _loss(T.layer_norm(c, gain, bias), wn), {"x": c, "gain": gain, "bias": bias}

    q, kv = r(3, 8), r(5, 8)
    ws_ = {n: r(8, 8) for n in ("w_q", "w_k", "w_v", "w_o")}
    mask = np.ones((3, 5), dtype=bool)
    mask[:, 4] = False
    wa = _weights(rng, (3, 8))
    yield ("multi_head_attention",
           lambda: _loss(nn.multi_head_attention(q, kv, kv, ws_["w_q"], ws_["w_k"], ws_["w_v"], ws_["w_o"], 2, mask), wa),
           {"q": q, "kv": kv, **ws_})


def check_ops(seed: int = 0, tol: float = 1e-4) -> list[tuple[str, GradCheckReport]]:
    return [(name, grad_check(f, inputs, tol=tol)) for name, f, inputs in op_cases(seed)]


def tiny_batch(rng: np.random.Generator, vocab_size: int = 11, n_examples: int = 2, n_turns: int = 2):
    """Random collated batch with ragged lengths (PAD positions included)."""
    def seq(lo, hi):
        return rng.integers(4, vocab_size, size=int(rng.integers(lo, hi + 1)))

    examples = []
    for _ in range(n_examples):
        examples.append(EncodedExample(
            [seq(2, 4) for _ in range(n_turns)],
            [seq(3, 5) for _ in range(n_turns)],
            np.concatenate([[2], seq(2, 4), [3]]),
            seq(3, 5),
        ))
    return collate(examples)


def check_model(variant: str, seed: int = 0, tol: float = 1e-4) -> GradCheckReport:
    """Gradient of L_mle w.r.t. every parameter of a tiny model; the draft is held fixed."""
    rng = np.random.default_rng(seed)
    model = ITDDModel(ModelConfig(**TINY, variant=variant, seed=seed))
    batch = tiny_batch(rng)
    with T.no_grad():
        draft = model(batch).draft
    return grad_check(lambda: batch_loss(model, batch, model(batch, draft=draft)).total, model.parameters(), tol=tol)


def check_models(seed: int = 0, tol: float = 1e-4) -> list[tuple[str, GradCheckReport]]:
    return [(v, check_model(v, seed, tol)) for v in VARIANTS]

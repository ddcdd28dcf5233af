"""Two-pass MLE objective, Adam and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Batch, EncodedExample, make_batches
from .model import ITDDModel, ModelConfig, ModelOutput
from .nn import ConfigError
from .tensor import Tensor
from .vocab import PAD

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "L_mle", "L_mle1", "L_mle2", "val_ppl_pass1", "val_ppl_pass2", "wall_ms")


class NumericError(ArithmeticError):
    """Non-finite loss or gradient."""


class TrainingDiverged(NumericError):
    def __init__(self, message: str, last_good: Path | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_steps: int = 1000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    eval_interval: int = 100
    seed: int = 0
    checkpoint_dir: str | None = None
    warmup_steps: int = 0

    def __post_init__(self):
        for name in ("batch_size", "max_steps", "lr", "clip_norm", "eval_interval"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


# ----------------------------------------------------------------------------
# loss


@dataclass
class LossReport:
    total: Tensor
    pass1: Tensor
    pass2: Tensor | None
    n_tokens: int

    @property
    def values(self) -> tuple[float, float, float]:
        l2 = self.pass2.item() if self.pass2 is not None else 0.0
        return self.total.item(), self.pass1.item(), l2

    @property
    def means(self) -> tuple[float, float, float]:
        return tuple(v / max(self.n_tokens, 1) for v in self.values)


def sequence_nll(logits: Tensor, gold: np.ndarray) -> Tensor:
    """Summed negative log-likelihood of ``gold`` ids; PAD positions are excluded."""
    gold = np.asarray(gold, dtype=np.int64)
    if logits.shape[:-1] != gold.shape:
        raise T.DimensionError(f"logits {logits.shape} do not match gold tokens {gold.shape}")
    picked = T.pick(T.log_softmax(logits, axis=-1), gold)
    weights = Tensor((gold != PAD).astype(np.float64))
    return T.scale(T.reduce_sum(T.mul(picked, weights)), -1.0)


def loss_two_pass(logits1: Tensor, logits2: Tensor | None, gold: np.ndarray) -> LossReport:
    """L_mle = L_mle1 + L_mle2; with a single-pass model L_mle = L_mle1."""
    gold = np.asarray(gold)
    l1 = sequence_nll(logits1, gold)
    if logits2 is None:
        return LossReport(l1, l1, None, int((gold != PAD).sum()))
    l2 = sequence_nll(logits2, gold)
    return LossReport(T.add(l1, l2), l1, l2, int((gold != PAD).sum()))


def batch_loss(model: ITDDModel, batch: Batch, output: ModelOutput | None = None) -> LossReport:
    output = model(batch) if output is None else output
    return loss_two_pass(output.logits1, output.logits2, batch.tgt_out)


# ----------------------------------------------------------------------------
# optimiser


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads))


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global norm is <= max_norm; returns the pre-clip norm."""
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads:
            g *= factor
    return norm


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **hyper) -> "AdamState":
        state = cls(**hyper)
        for path, p in params.items():
            state.m[path] = np.zeros_like(p.data)
            state.v[path] = np.zeros_like(p.data)
        return state


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float | None = None) -> None:
    """Bias-corrected Adam update of every parameter in place.

    Parameters without a gradient are treated as having a zero gradient.
    """
    for path, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient for parameter {path}")
    lr = state.lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for path, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.setdefault(path, np.zeros_like(p.data))
        v = state.v.setdefault(path, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ----------------------------------------------------------------------------
# training loop


@dataclass
class PassPerplexity:
    pass1: float
    pass2: float
    nll1: float
    nll2: float
    n_tokens: int


def corpus_nll(model: ITDDModel, batches: Sequence[Batch]) -> PassPerplexity:
    """Teacher-forced NLL totals per pass (the draft for pass 2 is the pass-1 argmax)."""
    nll1 = nll2 = 0.0
    n = 0
    with T.no_grad():
        for batch in batches:
            rep = batch_loss(model, batch)
            _, l1, l2 = rep.values
            nll1 += l1
            nll2 += l2 if rep.pass2 is not None else l1
            n += rep.n_tokens
    if n == 0:
        raise ValueError("perplexity needs at least one gold token")
    return PassPerplexity(math.exp(nll1 / n), math.exp(nll2 / n), nll1, nll2, n)


@dataclass
class TrainResult:
    model: ITDDModel
    adam: AdamState
    history: list[dict]
    best_val_ppl: float | None = None
    best_checkpoint: Path | None = None


def _lr_at(step: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    return cfg.lr


def train(
    examples: Sequence[EncodedExample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    val_examples: Sequence[EncodedExample] | None = None,
    vocab=None,
    model: ITDDModel | None = None,
    metrics_path: str | Path | None = None,
) -> TrainResult:
    """Minimise the per-token mean of L_mle with clipped Adam.

    Every ``eval_interval`` steps (and at the end) validation perplexity is
    computed; with a checkpoint directory the best model is kept under
    ``<dir>/best`` and the latest healthy model under ``<dir>/last``.
    """
    from .checkpoint import save_checkpoint

    if not examples:
        raise ValueError("training corpus is empty")
    cfg = train_config
    model = ITDDModel(model_config) if model is None else model
    params = model.parameters()
    adam = AdamState.for_params(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    model.set_training(rng)
    val_batches = make_batches(val_examples, cfg.batch_size) if val_examples else None
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    history: list[dict] = []
    best = None
    best_path = None
    last_good = None

    writer = None
    fh = None
    if metrics_path is None and ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = ckpt_dir / "metrics.csv"
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()

    t0 = time.perf_counter()
    step = 0
    batches: list[Batch] = []
    try:
        while step < cfg.max_steps:
            if not batches:
                batches = make_batches(examples, cfg.batch_size, rng)
            batch = batches.pop()
            step += 1
            model.zero_grad()
            rep = batch_loss(model, batch)
            total, l1, l2 = rep.values
            if not math.isfinite(total):
                raise TrainingDiverged(f"loss became non-finite at step {step}", last_good)
            T.scale(rep.total, 1.0 / rep.n_tokens).backward()
            clip_gradients(params, cfg.clip_norm)
            try:
                adam_step(params, adam, lr=_lr_at(step, cfg))
            except NumericError as exc:
                raise TrainingDiverged(f"step {step}: {exc}", last_good) from exc
            row = {
                "step": step,
                "L_mle": total,
                "L_mle1": l1,
                "L_mle2": l2,
                "val_ppl_pass1": "",
                "val_ppl_pass2": "",
                "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
            }
            if step % cfg.eval_interval == 0 or step == cfg.max_steps:
                model.set_training(None)
                if val_batches:
                    ppl = corpus_nll(model, val_batches)
                    row["val_ppl_pass1"], row["val_ppl_pass2"] = ppl.pass1, ppl.pass2
                    log.info("step %d loss %.4f val ppl %.3f / %.3f", step, total, ppl.pass1, ppl.pass2)
                    if best is None or ppl.pass2 < best:
                        best = ppl.pass2
                        if ckpt_dir is not None:
                            best_path = save_checkpoint(ckpt_dir / "best", model, vocab, adam, cfg, step=step)
                if ckpt_dir is not None:
                    last_good = save_checkpoint(ckpt_dir / "last", model, vocab, adam, cfg, step=step)
                model.set_training(rng)
            history.append(row)
            if writer is not None:
                writer.writerow(row)
    finally:
        model.set_training(None)
        if fh is not None:
            fh.close()
    if ckpt_dir is not None and best_path is None:
        best_path = last_good
    return TrainResult(model, adam, history, best, best_path)

"""Evaluation reports and the variant comparison harness."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

from .data import EncodedExample
from .decode import DEFAULT_BEAM, DEFAULT_MAX_LEN, respond_ids
from .metrics import bleu, perplexity
from .model import ITE_DD, ITDDModel, ModelConfig
from .train import TrainConfig, train
from .vocab import Vocab

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    variant: str
    ppl_pass1: float
    ppl_final: float
    bleu: float
    decoded: list[dict] = field(default_factory=list)

    @property
    def ppl_gap(self) -> float:
        return self.ppl_pass1 - self.ppl_final


def decode_examples(model: ITDDModel, vocab: Vocab, examples: Sequence[EncodedExample],
                    beam: int = DEFAULT_BEAM, max_len: int = DEFAULT_MAX_LEN) -> list[dict]:
    rows = []
    for ex in examples:
        first, final = respond_ids(model, ex.context, ex.context_docs, ex.target_doc, beam, max_len)
        rows.append({
            "context": [" ".join(vocab.decode(u, strip=False)) for u in ex.context],
            "first_pass": " ".join(vocab.decode(first)),
            "final": " ".join(vocab.decode(final)),
            "reference": " ".join(vocab.decode(ex.target[1:])),
        })
    return rows


def evaluate(model: ITDDModel, vocab: Vocab, examples: Sequence[EncodedExample], beam: int = DEFAULT_BEAM,
             max_len: int = DEFAULT_MAX_LEN, with_bleu: bool = True) -> EvalReport:
    """Per-pass gold perplexity plus BLEU of beam-decoded final responses."""
    ppl = perplexity(model, examples)
    rows = decode_examples(model, vocab, examples, beam, max_len) if with_bleu else []
    score = bleu([r["final"].split() for r in rows], [r["reference"].split() for r in rows]) if rows else float("nan")
    return EvalReport(model.variant, ppl.pass1, ppl.pass2, score, rows)


def compare_variants(train_examples: Sequence[EncodedExample], val_examples: Sequence[EncodedExample],
                     configs: Sequence[ModelConfig], train_config: TrainConfig, vocab: Vocab | None = None,
                     beam: int = DEFAULT_BEAM, max_len: int = DEFAULT_MAX_LEN,
                     with_bleu: bool = True) -> list[EvalReport]:
    """Train every variant with the same seed and steps, then evaluate on ``val_examples``."""
    if len(configs) < 2:
        raise ValueError("compare_variants needs at least two variants")
    reports = []
    for cfg in configs:
        log.info("training %s", cfg.variant)
        tc = replace(train_config, checkpoint_dir=None)
        result = train(train_examples, cfg, tc, val_examples=val_examples, vocab=vocab)
        if with_bleu and vocab is None:
            raise ValueError("BLEU needs a vocabulary")
        reports.append(evaluate(result.model, vocab, val_examples, beam, max_len, with_bleu))
    return reports


def format_table(reports: Sequence[EvalReport]) -> str:
    lines = [f"{'variant':<10} {'PPL(pass1)':>11} {'PPL(final)':>11} {'BLEU':>7}"]
    for r in reports:
        lines.append(f"{r.variant:<10} {r.ppl_pass1:>11.3f} {r.ppl_final:>11.3f} {r.bleu:>7.2f}")
    for r in reports:
        if r.variant == ITE_DD:
            lines.append(f"{ITE_DD} pass1 - final PPL gap: {r.ppl_gap:.3f}")
    return "\n".join(lines)

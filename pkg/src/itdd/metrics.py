"""Gold-response perplexity and corpus BLEU."""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

from .data import Batch, EncodedExample, make_batches
from .train import PassPerplexity, corpus_nll


def perplexity(model, dataset: Sequence[EncodedExample] | Sequence[Batch], batch_size: int = 32) -> PassPerplexity:
    """exp(total gold NLL / gold token count), per pass; PAD positions excluded."""
    if not dataset:
        raise ValueError("perplexity of an empty dataset is undefined")
    batches = list(dataset) if isinstance(dataset[0], Batch) else make_batches(dataset, batch_size)
    return corpus_nll(model, batches)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hypotheses, references, max_n: int = 4):
    """Clipped n-gram matches, n-gram totals, hypothesis and reference lengths."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = hyp.split() if isinstance(hyp, str) else list(hyp)
        ref = ref.split() if isinstance(ref, str) else list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def bleu(hypotheses, references, max_n: int = 4) -> float:
    """Corpus BLEU-4 in [0, 100], case-sensitive, unsmoothed.

    Inputs are token lists or whitespace-tokenised strings, one reference per
    hypothesis. Any zero n-gram precision yields 0.
    """
    matches, totals, c, r = bleu_stats(hypotheses, references, max_n)
    if c == 0 or any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p)

"""Unit-level BLEU and corpus decoding helpers.

Corpus BLEU over unit sequences with n-gram orders 1-4, geometric mean,
brevity penalty when the hypothesis side is shorter, and add-one smoothing
on zero-count precisions of order >= 2. Scores live in [0, 1].
"""

from __future__ import annotations

import math
from collections import Counter

import numpy as np

from .model import ArModel, NarModel

__all__ = ["unit_bleu", "decode_corpus", "evaluate_model"]

MAX_ORDER = 4


def _ngrams(seq: list[int], n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def unit_bleu(hypotheses: list[list[int]], references: list[list[int]]) -> float:
    """Corpus BLEU on unit id sequences, in [0, 1].

    An all-empty hypothesis corpus scores 0 by convention.
    """
    if len(hypotheses) != len(references):
        raise ValueError(
            f"got {len(hypotheses)} hypotheses for {len(references)} references"
        )
    if not hypotheses:
        raise ValueError("empty corpus")
    hyp_len = sum(len(h) for h in hypotheses)
    ref_len = sum(len(r) for r in references)
    if hyp_len == 0:
        return 0.0
    log_prec = 0.0
    for order in range(1, MAX_ORDER + 1):
        matches = 0
        total = 0
        for hyp, ref in zip(hypotheses, references):
            hyp_counts = _ngrams(hyp, order)
            if not hyp_counts:
                continue
            ref_counts = _ngrams(ref, order)
            total += sum(hyp_counts.values())
            matches += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
        if matches == 0:
            if order == 1:
                return 0.0
            precision = 1.0 / (total + 1.0)  # add-one smoothing
        else:
            precision = matches / total
        log_prec += math.log(precision)
    brevity = math.exp(1.0 - ref_len / hyp_len) if hyp_len < ref_len else 1.0
    return brevity * math.exp(log_prec / MAX_ORDER)


def decode_corpus(model: ArModel | NarModel, features: list[np.ndarray]) -> list[list[int]]:
    """Greedy decode of every sample (batch size 1, deterministic)."""
    out = []
    for frames in features:
        if isinstance(model, ArModel):
            units, _ = model.greedy_decode(frames)
        else:
            units, _ = model.greedy_units(frames)
        out.append(units)
    return out


def evaluate_model(
    model: ArModel | NarModel,
    features: list[np.ndarray],
    references: list[list[int]],
) -> float:
    return unit_bleu(decode_corpus(model, features), references)

"""Unit-BLEU contract tests."""

import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cs2u.evaluate import unit_bleu

corpus = st.lists(
    st.lists(st.integers(0, 6), min_size=1, max_size=8), min_size=1, max_size=6
)


def test_identity_scores_one():
    hyps = [[1, 2, 3], [4], [5, 5, 6, 7]]
    assert unit_bleu(hyps, [list(h) for h in hyps]) == pytest.approx(1.0)


def test_all_empty_hypotheses_score_zero():
    assert unit_bleu([[], []], [[1, 2], [3]]) == 0.0


def test_hand_computed_brevity_example():
    # matches 4/4, 3/3, 2/2, 1/1; brevity penalty exp(1 - 5/4)
    got = unit_bleu([[0, 1, 2, 3]], [[0, 1, 2, 3, 4]])
    assert got == pytest.approx(math.exp(1.0 - 5.0 / 4.0), abs=1e-12)


def test_no_unigram_overlap_scores_zero():
    assert unit_bleu([[1, 1, 1]], [[2, 3]]) == 0.0


def test_smoothing_keeps_partial_credit_positive():
    # unigrams match but no higher-order n-gram does
    got = unit_bleu([[1, 3, 2]], [[1, 2, 3]])
    assert 0.0 < got < 1.0


def test_longer_hypothesis_has_no_brevity_penalty():
    # hyp longer than ref: precisions drop but BP stays 1
    full = unit_bleu([[0, 1, 2, 3]], [[0, 1, 2, 3]])
    longer = unit_bleu([[0, 1, 2, 3, 9]], [[0, 1, 2, 3]])
    assert full == pytest.approx(1.0)
    assert 0.0 < longer < 1.0


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        unit_bleu([[1]], [[1], [2]])
    with pytest.raises(ValueError):
        unit_bleu([], [])


@given(corpus)
def test_identity_is_one_on_nonempty_corpora(hyps):
    assert unit_bleu(hyps, [list(h) for h in hyps]) == pytest.approx(1.0)


@given(corpus, st.randoms())
def test_permutation_invariance(hyps, rnd):
    refs = [list(reversed(h)) for h in hyps]
    pairs = list(zip(hyps, refs))
    rnd.shuffle(pairs)
    shuffled_h = [p[0] for p in pairs]
    shuffled_r = [p[1] for p in pairs]
    assert unit_bleu(shuffled_h, shuffled_r) == pytest.approx(
        unit_bleu(hyps, refs), abs=1e-12
    )


@given(corpus, corpus.map(lambda c: c))
def test_score_range(hyps, refs):
    n = min(len(hyps), len(refs))
    score = unit_bleu(hyps[:n], refs[:n])
    assert 0.0 <= score <= 1.0

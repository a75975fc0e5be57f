"""CTC kernels against enumeration oracles and finite differences.

The brute-force oracle sums products over enumerate_preimage; the DP must
agree in log space to 1e-9 on every small instance.
"""

import numpy as np
import pytest

from cs2u.autodiff import finite_difference, max_rel_error
from cs2u.ctc import (
    InfeasibleTargetError,
    LogProbLattice,
    ctc_log_likelihood,
    ctc_loss_grad,
    greedy_decode,
    viterbi_alignment,
)
from cs2u.units import UnitVocab, collapse, enumerate_preimage, min_alignment_length


def brute_force_loglik(lattice: LogProbLattice, y) -> float:
    """Enumeration ground truth for log P(Y|X)."""
    vocab = UnitVocab(lattice.n_units)
    total = 0.0
    prob = np.exp(lattice.logp)
    for a in enumerate_preimage(y, lattice.n_positions, vocab):
        total += float(np.prod(prob[np.arange(lattice.n_positions), list(a)]))
    return float(np.log(total)) if total > 0 else float("-inf")


def random_instance(rng, t_max=6, k_max=3, m_max=4):
    t_len = int(rng.integers(1, t_max + 1))
    k = int(rng.integers(1, k_max + 1))
    scores = rng.uniform(-2, 2, size=(t_len, k + 1))
    lattice = LogProbLattice.from_scores(scores)
    m = int(rng.integers(0, m_max + 1))
    y = rng.integers(0, k, size=m).tolist()
    return lattice, y, scores


def feasible_instance(rng, t_max=6, k_max=3, m_max=4):
    while True:
        lattice, y, scores = random_instance(rng, t_max, k_max, m_max)
        if lattice.n_positions >= min_alignment_length(y):
            return lattice, y, scores


def test_uniform_lattice_single_unit():
    # Three alignments of probability 1/9 each sum to 1/3.
    lattice = LogProbLattice(np.full((2, 3), np.log(1.0 / 3.0)))
    got = ctc_log_likelihood(lattice, [0])
    assert abs(got - np.log(1.0 / 3.0)) < 1e-12


def test_infeasible_target_returns_sentinel():
    lattice = LogProbLattice(np.full((2, 3), np.log(1.0 / 3.0)))
    assert ctc_log_likelihood(lattice, [0, 0]) == float("-inf")


def test_empty_target_is_all_blank_probability():
    logp = np.full((3, 3), -np.inf)
    logp[:, 2] = 0.0  # blank certain at every position
    lattice = LogProbLattice(logp)
    assert ctc_log_likelihood(lattice, []) == 0.0


def test_rejects_unnormalized_lattice():
    with pytest.raises(ValueError):
        ctc_log_likelihood(LogProbLattice(np.zeros((2, 3))), [0])


def test_rejects_out_of_range_target():
    lattice = LogProbLattice(np.full((2, 3), np.log(1.0 / 3.0)))
    with pytest.raises(ValueError):
        ctc_log_likelihood(lattice, [2])


def test_dp_matches_enumeration(rng):
    for _ in range(200):
        lattice, y, _ = random_instance(rng)
        want = brute_force_loglik(lattice, y)
        got = ctc_log_likelihood(lattice, y)
        if want == float("-inf"):
            assert got == float("-inf")
        else:
            assert abs(got - want) < 1e-9


def test_loss_grad_rows_sum_to_minus_one(rng):
    for _ in range(50):
        lattice, y, _ = feasible_instance(rng)
        _, grad = ctc_loss_grad(lattice, y)
        assert np.all(np.abs(grad.sum(axis=1) + 1.0) < 1e-9)


def test_loss_grad_finite_differences_tiny():
    rng = np.random.default_rng(3)
    scores = rng.uniform(-2, 2, size=(3, 3))
    y = [0]

    def f(s):
        return ctc_loss_grad(LogProbLattice.from_scores(s), y)[0]

    lattice = LogProbLattice.from_scores(scores)
    _, g_logp = ctc_loss_grad(lattice, y)
    soft = np.exp(lattice.logp)
    g_scores = g_logp - soft * g_logp.sum(axis=1, keepdims=True)
    err = max_rel_error(g_scores, finite_difference(f, scores))
    assert err < 1e-6


def test_loss_grad_finite_differences_family(rng):
    for _ in range(50):
        lattice, y, scores = feasible_instance(rng)

        def f(s):
            return ctc_loss_grad(LogProbLattice.from_scores(s), y)[0]

        _, g_logp = ctc_loss_grad(lattice, y)
        soft = np.exp(lattice.logp)
        g_scores = g_logp - soft * g_logp.sum(axis=1, keepdims=True)
        assert max_rel_error(g_scores, finite_difference(f, scores)) < 1e-4


def test_loss_matches_enumeration(rng):
    for _ in range(100):
        lattice, y, _ = feasible_instance(rng)
        loss, _ = ctc_loss_grad(lattice, y)
        assert abs(loss + brute_force_loglik(lattice, y)) < 1e-9


def test_infeasible_loss_names_min_length():
    lattice = LogProbLattice(np.full((2, 3), np.log(1.0 / 3.0)))
    with pytest.raises(InfeasibleTargetError) as exc:
        ctc_loss_grad(lattice, [0, 0])
    assert exc.value.required_length == 3
    assert "3" in str(exc.value)


def test_monotone_in_target_symbol_mass(rng):
    # Raising the raw log-probability of any symbol of the expanded target
    # (units of y or blank) can never lower the unnormalized DP value.
    for _ in range(20):
        lattice, y, _ = feasible_instance(rng)
        base = ctc_log_likelihood(lattice, y)
        symbols = set(y) | {lattice.blank_id}
        for t in range(lattice.n_positions):
            for v in symbols:
                bumped = lattice.logp.copy()
                bumped[t, v] += 1e-3
                got = ctc_log_likelihood(LogProbLattice(bumped), y, validate=False)
                assert got - base >= -1e-12


# ---------------------------------------------------------------------------
# Viterbi


def state_path(alignment, y, blank):
    """Map an alignment to its unique expanded-state path (oracle helper)."""
    ext = [blank]
    for u in y:
        ext += [u, blank]
    path = []
    s = 0 if alignment[0] == blank else 1
    assert ext[s] == alignment[0]
    path.append(s)
    for tok in alignment[1:]:
        for nxt in (s, s + 1, s + 2):
            if nxt >= len(ext) or (nxt == s + 2 and (ext[nxt] == blank or ext[nxt] == ext[s])):
                continue
            if ext[nxt] == tok:
                s = nxt
                break
        else:
            raise AssertionError("no transition found")
        path.append(s)
    return path


def brute_force_viterbi(lattice, y):
    """Argmax over the enumerated preimage, with the DP's tie-break: the
    optimal path whose reversed state sequence is lexicographically least."""
    vocab = UnitVocab(lattice.n_units)
    cands = enumerate_preimage(y, lattice.n_positions, vocab)
    probs = [
        float(np.sum(lattice.logp[np.arange(lattice.n_positions), list(a)]))
        for a in cands
    ]
    best = max(probs)
    ties = [a for a, p in zip(cands, probs) if abs(p - best) < 1e-12]
    keyed = sorted(
        ties, key=lambda a: tuple(reversed(state_path(a, y, lattice.blank_id)))
    )
    return list(keyed[0]), best


def test_viterbi_prefers_blank_tail():
    lattice = LogProbLattice(np.log(np.array([[0.6, 0.1, 0.3], [0.2, 0.1, 0.7]])))
    assert viterbi_alignment(lattice, [0]) == [0, 2]


def test_viterbi_empty_target_is_all_blank(rng):
    lattice = LogProbLattice.from_scores(rng.uniform(-2, 2, (4, 3)))
    assert viterbi_alignment(lattice, []) == [2, 2, 2, 2]


def test_viterbi_matches_brute_force(rng):
    for _ in range(150):
        lattice, y, _ = feasible_instance(rng)
        got = viterbi_alignment(lattice, y)
        want, best = brute_force_viterbi(lattice, y)
        got_val = float(np.sum(lattice.logp[np.arange(lattice.n_positions), got]))
        assert abs(got_val - best) < 1e-12
        assert got == want
        assert collapse(got, lattice.blank_id) == list(y)


def test_viterbi_tie_break_on_uniform_lattice():
    lattice = LogProbLattice(np.full((3, 3), np.log(1.0 / 3.0)))
    got = viterbi_alignment(lattice, [0])
    want, _ = brute_force_viterbi(lattice, [0])
    assert got == want


def test_viterbi_infeasible_raises():
    lattice = LogProbLattice(np.full((2, 3), np.log(1.0 / 3.0)))
    with pytest.raises(InfeasibleTargetError):
        viterbi_alignment(lattice, [0, 0])


# ---------------------------------------------------------------------------
# greedy decoding


def test_greedy_decode_example():
    logp = np.log(
        np.array(
            [
                [0.8, 0.1, 0.1],
                [0.8, 0.1, 0.1],
                [0.1, 0.1, 0.8],
                [0.1, 0.8, 0.1],
            ]
        )
    )
    assert greedy_decode(LogProbLattice(logp)) == [0, 1]


def test_greedy_decode_all_blank():
    logp = np.log(np.array([[0.1, 0.1, 0.8], [0.2, 0.2, 0.6]]))
    assert greedy_decode(LogProbLattice(logp)) == []


def test_greedy_decode_equals_recomputation(rng):
    for _ in range(50):
        lattice, _, _ = random_instance(rng)
        want = collapse(np.argmax(lattice.logp, axis=1).tolist(), lattice.blank_id)
        assert greedy_decode(lattice) == want

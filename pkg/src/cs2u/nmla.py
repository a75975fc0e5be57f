"""Bigram-matching fine-tuning loss over the alignment distribution.

Under the per-position factorized model, the expected count of a collapsed
bigram (u, v) has a closed form: a pair of positions t < t' with a_t = u,
a_t' = v, only blanks strictly between, excluding the adjacent-equal case
(u = v and t' = t + 1), summed with a suffix recursion in O(T*K^2). The loss
is one minus the clipped-count F1 against the reference bigram table.
"""

from __future__ import annotations

import numpy as np

from .ctc import LogProbLattice

__all__ = [
    "BigramTable",
    "reference_bigrams",
    "expected_bigrams",
    "nmla_loss_grad",
    "nmla_loss_from_bigrams",
]

BigramTable = dict[tuple[int, int], float]


def reference_bigrams(units) -> BigramTable:
    """Counts of adjacent unit pairs; empty for sequences of length <= 1."""
    table: BigramTable = {}
    for u, v in zip(units, units[1:]):
        table[(u, v)] = table.get((u, v), 0) + 1
    return table


def _expected_matrix(prob: np.ndarray) -> np.ndarray:
    """E[count of collapsed bigram (u, v)] as a (K, K) matrix.

    prob is the (T, K+1) probability lattice, blank last. q[t, v] accumulates
    the probability that the first non-blank symbol strictly after t is v:
    q[t] = P[t+1, v] + P[t+1, blank] * q[t+1].
    """
    t_len, width = prob.shape
    k = width - 1
    unit_p = prob[:, :k]
    blank_p = prob[:, k]
    q = np.zeros((t_len, k))
    for t in range(t_len - 2, -1, -1):
        q[t] = unit_p[t + 1] + blank_p[t + 1] * q[t + 1]
    expected = unit_p.T @ q
    if t_len > 1:
        adjacent_same = (unit_p[:-1] * unit_p[1:]).sum(axis=0)
        expected[np.diag_indices(k)] -= adjacent_same
    return expected


def expected_bigrams(lattice: LogProbLattice, validate: bool = True) -> BigramTable:
    """Expected collapsed-bigram counts under the lattice's distribution."""
    if validate:
        lattice.validate()
    expected = _expected_matrix(np.exp(lattice.logp))
    k = lattice.n_units
    return {
        (u, v): float(expected[u, v])
        for u in range(k)
        for v in range(k)
        if expected[u, v] != 0.0
    }


def nmla_loss_from_bigrams(
    lattice: LogProbLattice, reference: BigramTable, validate: bool = True
) -> tuple[float, np.ndarray]:
    """Loss 1 - F1 of clipped expected-vs-reference bigram counts, plus the
    gradient w.r.t. the log-lattice.

    The min() subgradient passes gradient only where the expected count is
    the smaller side. When both bigram totals are zero the loss is 0 with a
    zero gradient.
    """
    if validate:
        lattice.validate()
    logp = lattice.logp
    t_len = lattice.n_positions
    k = lattice.n_units
    prob = np.exp(logp)
    unit_p = prob[:, :k]
    blank_p = prob[:, k]

    q = np.zeros((t_len, k))
    for t in range(t_len - 2, -1, -1):
        q[t] = unit_p[t + 1] + blank_p[t + 1] * q[t + 1]
    expected = unit_p.T @ q
    if t_len > 1:
        adjacent_same = (unit_p[:-1] * unit_p[1:]).sum(axis=0)
        expected[np.diag_indices(k)] -= adjacent_same

    ref = np.zeros((k, k))
    for (u, v), c in reference.items():
        if not (0 <= u < k and 0 <= v < k):
            raise ValueError(f"reference bigram {(u, v)} outside unit range [0, {k})")
        ref[u, v] = c

    match = float(np.minimum(expected, ref).sum())
    pred_total = float(expected.sum())
    ref_total = float(ref.sum())
    total = pred_total + ref_total
    if total == 0.0:
        return 0.0, np.zeros_like(logp)
    loss = 1.0 - 2.0 * match / total

    # d loss / d expected[u, v]
    g_e = np.full((k, k), 2.0 * match / total**2)
    g_e[expected < ref] -= 2.0 / total

    # Backprop through the suffix recursion to the probability lattice.
    g_unit = q @ g_e.T  # from expected = unit_p.T @ q
    g_q = unit_p @ g_e
    if t_len > 1:
        g_diag = -np.diag(g_e)
        g_unit[:-1] += g_diag * unit_p[1:]
        g_unit[1:] += g_diag * unit_p[:-1]
    g_blank = np.zeros(t_len)
    for t in range(t_len - 1):
        g = g_q[t]
        g_unit[t + 1] += g
        g_blank[t + 1] += float(g @ q[t + 1])
        g_q[t + 1] += g * blank_p[t + 1]

    grad = np.zeros_like(logp)
    grad[:, :k] = g_unit * unit_p
    grad[:, k] = g_blank * blank_p
    return loss, grad


def nmla_loss_grad(
    lattice: LogProbLattice, units, validate: bool = True
) -> tuple[float, np.ndarray]:
    """Bigram-matching loss against a unit sequence (see
    nmla_loss_from_bigrams; the target enters only through its bigram table)."""
    for u in units:
        if not 0 <= u < lattice.n_units:
            raise ValueError(f"target unit {u} outside [0, {lattice.n_units})")
    return nmla_loss_from_bigrams(lattice, reference_bigrams(units), validate=validate)

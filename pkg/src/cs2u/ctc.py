"""Exact CTC computations on a per-position log-probability lattice.

All dynamic programs run over the blank-interleaved label sequence
(2M+1 states) in log space: the marginal log-likelihood, its occupancy
gradient via forward-backward, the Viterbi best alignment used by glancing
training, and one-pass greedy decoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .units import collapse, min_alignment_length

__all__ = [
    "LogProbLattice",
    "InfeasibleTargetError",
    "ctc_log_likelihood",
    "ctc_loss_grad",
    "viterbi_alignment",
    "greedy_decode",
]

NEG_INF = float("-inf")


class InfeasibleTargetError(ValueError):
    """Raised when T is shorter than the minimum feasible alignment length."""

    def __init__(self, n_positions: int, required: int):
        super().__init__(
            f"lattice has {n_positions} positions but the target needs at "
            f"least min_alignment_length = {required}"
        )
        self.n_positions = n_positions
        self.required_length = required


@dataclass
class LogProbLattice:
    """T x (K+1) per-position log-probabilities; blank is the last column."""

    logp: np.ndarray

    def __post_init__(self):
        self.logp = np.asarray(self.logp, dtype=np.float64)
        if self.logp.ndim != 2 or self.logp.shape[1] < 2:
            raise ValueError(f"lattice must be (T, K+1) with K >= 1, got {self.logp.shape}")

    @property
    def n_positions(self) -> int:
        return self.logp.shape[0]

    @property
    def n_units(self) -> int:
        return self.logp.shape[1] - 1

    @property
    def blank_id(self) -> int:
        return self.n_units

    @classmethod
    def from_scores(cls, scores: np.ndarray) -> "LogProbLattice":
        """Row-wise log-softmax of unnormalized scores."""
        scores = np.asarray(scores, dtype=np.float64)
        m = scores.max(axis=1, keepdims=True)
        s = scores - m
        return cls(s - np.log(np.exp(s).sum(axis=1, keepdims=True)))

    def validate(self, tol: float = 1e-9) -> None:
        if np.any(self.logp > tol):
            raise ValueError("lattice has log-probabilities above zero")
        row_max = self.logp.max(axis=1, keepdims=True)
        lse = row_max[:, 0] + np.log(np.exp(self.logp - row_max).sum(axis=1))
        bad = np.nonzero(np.abs(lse) > tol)[0]
        if bad.size:
            raise ValueError(
                f"lattice row {bad[0]} is not normalized (logsumexp = {lse[bad[0]]:.3e})"
            )


def _check_target(lattice: LogProbLattice, units) -> list[int]:
    y = list(units)
    for u in y:
        if not 0 <= u < lattice.n_units:
            raise ValueError(f"target unit {u} outside [0, {lattice.n_units})")
    return y


def _expand(y: list[int], blank: int) -> tuple[np.ndarray, np.ndarray]:
    """Blank-interleaved labels and the skip-transition mask.

    ext = [b, y1, b, y2, ..., yM, b]; skipping over a blank into state s is
    allowed only when s holds a unit different from the unit two states back.
    """
    m = len(y)
    ext = np.full(2 * m + 1, blank, dtype=np.intp)
    ext[1::2] = y
    skip = np.zeros(2 * m + 1, dtype=bool)
    for s in range(3, 2 * m + 1, 2):
        skip[s] = ext[s] != ext[s - 2]
    return ext, skip


def _forward(logp: np.ndarray, ext: np.ndarray, skip: np.ndarray) -> np.ndarray:
    t_len = logp.shape[0]
    n_states = ext.shape[0]
    alpha = np.full((t_len, n_states), NEG_INF)
    alpha[0, 0] = logp[0, ext[0]]
    if n_states > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        if n_states > 2:
            acc[2:] = np.where(
                skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:]
            )
        alpha[t] = acc + logp[t, ext]
    return alpha


def ctc_log_likelihood(lattice: LogProbLattice, units, validate: bool = True) -> float:
    """log P(Y|X) marginalized over the collapse preimage; -inf if infeasible."""
    if validate:
        lattice.validate()
    y = _check_target(lattice, units)
    t_len = lattice.n_positions
    if t_len < min_alignment_length(y):
        return NEG_INF
    ext, skip = _expand(y, lattice.blank_id)
    alpha = _forward(lattice.logp, ext, skip)
    ll = alpha[-1, -1]
    if ext.shape[0] > 1:
        ll = np.logaddexp(ll, alpha[-1, -2])
    return float(ll)


def ctc_loss_grad(
    lattice: LogProbLattice, units, validate: bool = True
) -> tuple[float, np.ndarray]:
    """Negative log-likelihood and its gradient w.r.t. the log-lattice.

    grad[t, v] = -P(a_t = v | A collapses to Y); every row sums to -1. The
    gradient treats lattice entries as free log-probabilities; chaining
    through a log-softmax gives the usual training-path gradient.
    """
    if validate:
        lattice.validate()
    y = _check_target(lattice, units)
    logp = lattice.logp
    t_len = lattice.n_positions
    required = min_alignment_length(y)
    if t_len < required:
        raise InfeasibleTargetError(t_len, required)
    ext, skip = _expand(y, lattice.blank_id)
    n_states = ext.shape[0]
    alpha = _forward(logp, ext, skip)

    # beta[t, s]: log-sum over suffix paths from state s, emissions after t.
    beta = np.full((t_len, n_states), NEG_INF)
    beta[-1, -1] = 0.0
    if n_states > 1:
        beta[-1, -2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + logp[t + 1, ext]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        if n_states > 2:
            acc[:-2] = np.where(
                skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2]
            )
        beta[t] = acc

    ll = alpha[-1, -1]
    if n_states > 1:
        ll = np.logaddexp(ll, alpha[-1, -2])
    if not np.isfinite(ll):
        raise InfeasibleTargetError(t_len, required)

    occupancy = np.exp(alpha + beta - ll)  # (T, S), rows sum to 1
    grad = np.zeros_like(logp)
    for s in range(n_states):
        grad[:, ext[s]] -= occupancy[:, s]
    return float(-ll), grad


def viterbi_alignment(lattice: LogProbLattice, units, validate: bool = True) -> list[int]:
    """Highest-probability alignment that collapses to the target.

    Ties break toward the smallest expanded-state index, both at the final
    state and at every backtrace step, so the result is deterministic.
    """
    if validate:
        lattice.validate()
    y = _check_target(lattice, units)
    logp = lattice.logp
    t_len = lattice.n_positions
    required = min_alignment_length(y)
    if t_len < required:
        raise InfeasibleTargetError(t_len, required)
    ext, skip = _expand(y, lattice.blank_id)
    n_states = ext.shape[0]

    value = np.full((t_len, n_states), NEG_INF)
    choice = np.zeros((t_len, n_states), dtype=np.intp)  # predecessor state
    value[0, 0] = logp[0, ext[0]]
    choice[0, 0] = 0
    if n_states > 1:
        value[0, 1] = logp[0, ext[1]]
        choice[0, 1] = 1
    for t in range(1, t_len):
        prev = value[t - 1]
        # Candidates stacked in ascending predecessor order (s-2, s-1, s):
        # argmax keeps the first maximum, i.e. the smallest state index.
        cand = np.full((3, n_states), NEG_INF)
        cand[2] = prev
        cand[1, 1:] = prev[:-1]
        if n_states > 2:
            cand[0, 2:] = np.where(skip[2:], prev[:-2], NEG_INF)
        best = np.argmax(cand, axis=0)
        value[t] = cand[best, np.arange(n_states)] + logp[t, ext]
        choice[t] = np.arange(n_states) - (2 - best)

    if n_states > 1 and value[-1, -2] >= value[-1, -1]:
        state = n_states - 2
    else:
        state = n_states - 1
    path = np.empty(t_len, dtype=np.intp)
    path[-1] = state
    for t in range(t_len - 1, 0, -1):
        state = choice[t, state]
        path[t - 1] = state
    return [int(ext[s]) for s in path]


def greedy_decode(lattice: LogProbLattice, validate: bool = True) -> list[int]:
    """Per-position argmax followed by collapse; one parallel pass."""
    if validate:
        lattice.validate()
    best = np.argmax(lattice.logp, axis=1)
    return collapse(best.tolist(), lattice.blank_id)

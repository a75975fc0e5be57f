"""Glancing training: reveal part of the best alignment to the decoder input.

A first pass (no gradients) produces the lattice; the Viterbi alignment A*
and the per-position argmax are compared, and ceil(ratio * distance) decoder
input rows are replaced with embeddings of A* tokens. Sampling is a seeded
permutation prefix, so with a fixed seed a larger ratio replaces a strict
superset of positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .ctc import LogProbLattice, viterbi_alignment

__all__ = ["GlancingSchedule", "GlanceResult", "ratio_at", "glance"]


@dataclass(frozen=True)
class GlancingSchedule:
    start_ratio: float = 0.5
    end_ratio: float = 0.3
    decay_steps: int = 100_000

    def __post_init__(self):
        if not 0.0 <= self.end_ratio <= self.start_ratio <= 1.0:
            raise ValueError(
                f"need 0 <= end {self.end_ratio} <= start {self.start_ratio} <= 1"
            )
        if self.decay_steps < 1:
            raise ValueError(f"decay_steps must be >= 1, got {self.decay_steps}")


def ratio_at(step: int, sched: GlancingSchedule) -> float:
    """Linear decay from start to end over decay_steps, constant afterwards."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    frac = min(step / sched.decay_steps, 1.0)
    return sched.start_ratio + (sched.end_ratio - sched.start_ratio) * frac


@dataclass
class GlanceResult:
    decoder_input: Tensor
    n_replaced: int
    positions: np.ndarray  # replaced positions, sorted
    best_alignment: list[int]
    first_pass_alignment: np.ndarray
    distance: float


def glance(
    e: Tensor,
    lattice: LogProbLattice,
    units,
    ratio: float,
    seed: int,
    embeddings: Parameter,
    position_mode: str = "all",
    distance_mode: str = "hamming",
) -> GlanceResult:
    """Replace sampled rows of the decoder input with best-alignment embeddings.

    `lattice` must come from a first pass over the unmodified input. The
    replacement count is ceil(ratio * d) where d is the Hamming distance
    between the first-pass argmax alignment and the Viterbi alignment
    (distance_mode="expected" uses sum_t (1 - p_t(a*_t)) instead). Positions
    are a prefix of a seeded permutation of all T indices, or of the
    mismatched indices only under position_mode="mismatched".
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"glancing ratio must be in [0, 1], got {ratio}")
    if position_mode not in ("all", "mismatched"):
        raise ValueError(f"unknown position_mode {position_mode!r}")
    if distance_mode not in ("hamming", "expected"):
        raise ValueError(f"unknown distance_mode {distance_mode!r}")
    t_len = lattice.n_positions
    if e.shape[0] != t_len:
        raise ValueError(
            f"decoder input has {e.shape[0]} rows but lattice has {t_len} positions"
        )
    best = viterbi_alignment(lattice, units, validate=False)
    first = np.argmax(lattice.logp, axis=1)
    mismatched = np.nonzero(first != np.asarray(best))[0]
    if distance_mode == "hamming":
        distance = float(mismatched.size)
    else:
        distance = float(np.sum(1.0 - np.exp(lattice.logp[np.arange(t_len), best])))

    n_replaced = math.ceil(ratio * distance)
    pool = np.arange(t_len) if position_mode == "all" else mismatched
    n_replaced = min(n_replaced, pool.size)
    if n_replaced == 0:
        return GlanceResult(e, 0, np.empty(0, dtype=np.intp), best, first, distance)
    perm = np.random.default_rng(seed).permutation(pool.size)
    positions = np.sort(pool[perm[:n_replaced]])
    tokens = np.asarray(best, dtype=np.intp)[positions]
    modified = ad.replace_rows(e, positions, embeddings, tokens)
    return GlanceResult(modified, n_replaced, positions, best, first, distance)

"""Unit alphabet and alignment/collapse semantics.

The collapse function merges maximal runs of identical tokens and then drops
blanks; its brute-force preimage enumeration is the ground truth every loss
kernel is tested against.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Iterable, Sequence

__all__ = [
    "UnitVocab",
    "DEFAULT_ENUMERATION_CAP",
    "collapse",
    "min_alignment_length",
    "enumerate_preimage",
    "format_unit_line",
    "parse_unit_line",
]

# Unit sequences are plain lists of ints in [0, K); alignments are lists of
# ints in [0, K] with the blank fixed at id K.

DEFAULT_ENUMERATION_CAP = 10_000_000


@dataclass(frozen=True)
class UnitVocab:
    """K real units with ids 0..K-1 plus the blank at id K."""

    n_units: int

    def __post_init__(self):
        if self.n_units < 1:
            raise ValueError(f"need at least one unit, got {self.n_units}")

    @property
    def blank_id(self) -> int:
        return self.n_units

    @property
    def n_symbols(self) -> int:
        """Size of the output space including the blank."""
        return self.n_units + 1


def collapse(tokens: Sequence[int], blank_id: int) -> list[int]:
    """Merge runs of identical tokens, then delete blanks."""
    out: list[int] = []
    prev = None
    for tok in tokens:
        if not 0 <= tok <= blank_id:
            raise ValueError(f"token {tok} outside [0, {blank_id}]")
        if tok != prev:
            out.append(tok)
            prev = tok
    return [t for t in out if t != blank_id]


def min_alignment_length(units: Sequence[int]) -> int:
    """Shortest T for which some length-T alignment collapses to `units`.

    Equal adjacent units force a separating blank, hence the pair count.
    """
    repeats = sum(1 for a, b in zip(units, units[1:]) if a == b)
    return len(units) + repeats


def enumerate_preimage(
    units: Sequence[int],
    length: int,
    vocab: UnitVocab,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> list[tuple[int, ...]]:
    """All alignments of the given length that collapse to `units`.

    Brute force over every (K+1)^length candidate, so the candidate count
    must stay below `cap`.
    """
    if length < 1:
        raise ValueError(f"alignment length must be >= 1, got {length}")
    n_candidates = vocab.n_symbols**length
    if n_candidates > cap:
        raise ValueError(
            f"enumeration of {n_candidates} candidates exceeds cap {cap}"
        )
    target = list(units)
    blank = vocab.blank_id
    return [
        cand
        for cand in product(range(vocab.n_symbols), repeat=length)
        if collapse(cand, blank) == target
    ]


def format_unit_line(units: Iterable[int]) -> str:
    return " ".join(str(u) for u in units)


def parse_unit_line(line: str) -> list[int]:
    stripped = line.strip()
    if not stripped:
        return []
    return [int(tok) for tok in stripped.split()]

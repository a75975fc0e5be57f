"""Desk-scale CTC-based non-autoregressive speech-to-unit translation."""

from .units import UnitVocab, collapse, enumerate_preimage, min_alignment_length
from .ctc import (
    InfeasibleTargetError,
    LogProbLattice,
    ctc_log_likelihood,
    ctc_loss_grad,
    greedy_decode,
    viterbi_alignment,
)
from .nmla import expected_bigrams, nmla_loss_grad, reference_bigrams
from .model import ArModel, ModelConfig, NarModel, build_model, transfer_encoder
from .glat import GlancingSchedule, glance, ratio_at
from .evaluate import unit_bleu

__version__ = "0.1.0"

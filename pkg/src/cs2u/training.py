"""Training loops: Adam with warmup + inverse-sqrt decay, the two-stage
recipe for the parallel model (CTC with glancing, then bigram-matching
fine-tuning), the autoregressive baseline, and teacher distillation.

Everything is seeded and single-threaded; two runs with the same config
produce bitwise-identical logs and checkpoints.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .ctc import InfeasibleTargetError, LogProbLattice, ctc_loss_grad
from .data import load_split, read_manifest, write_manifest, write_units
from .glat import GlancingSchedule, glance, ratio_at
from .model import (
    ArModel,
    ModelConfig,
    NarModel,
    RunContext,
    build_model,
    load_checkpoint,
    save_checkpoint,
    transfer_encoder,
)
from .nmla import nmla_loss_grad
from .units import min_alignment_length

__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "learning_rate",
    "Adam",
    "train",
    "distill",
    "DistillReport",
]

logger = logging.getLogger(__name__)

STAGES = ("ar", "nar-stage1", "nar-stage2")

DIVERGENCE_FACTOR = 10.0


@dataclass
class TrainConfig:
    stage1_steps: int = 8000
    stage1_peak_lr: float = 1e-3
    stage1_warmup: int = 800
    stage2_steps: int = 1000
    stage2_peak_lr: float = 3e-4
    stage2_warmup: int = 100
    stage2_glance_ratio: float = 0.3
    batch_frames: int = 8000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float = 1.0
    glance_start: float = 0.5
    glance_end: float = 0.3
    glance_decay_steps: int = 4000
    glance_position_mode: str = "all"
    glance_distance_mode: str = "hamming"
    valid_interval: int = 0  # 0 disables periodic validation
    seed: int = 0

    def schedule(self) -> GlancingSchedule:
        return GlancingSchedule(self.glance_start, self.glance_end, self.glance_decay_steps)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainResult:
    stage: str
    steps: int
    final_loss: float
    checkpoint_path: str
    skipped_infeasible: int
    glance_skipped: int
    losses: list[float] = field(default_factory=list)


def learning_rate(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to `peak` at step == warmup, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if step <= warmup:
        return peak * step / warmup
    return peak * math.sqrt(warmup / step)


class Adam:
    def __init__(self, params: list[tuple[str, Parameter]], cfg: TrainConfig):
        self.params = params
        self.beta1 = cfg.adam_beta1
        self.beta2 = cfg.adam_beta2
        self.eps = cfg.adam_eps
        self.m = {n: np.zeros_like(p.data) for n, p in params}
        self.v = {n: np.zeros_like(p.data) for n, p in params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(params: list[tuple[str, Parameter]], max_norm: float) -> float:
    total = 0.0
    for _, p in params:
        total += float((p.grad**2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for _, p in params:
            p.grad *= factor
    return norm


def _batches(n_samples: int, frame_counts: list[int], budget: int, rng) -> list[list[int]]:
    """Shuffle sample indices, then group greedily by source-frame budget."""
    order = rng.permutation(n_samples)
    batches: list[list[int]] = []
    current: list[int] = []
    frames = 0
    for idx in order:
        idx = int(idx)
        if current and frames + frame_counts[idx] > budget:
            batches.append(current)
            current = []
            frames = 0
        current.append(idx)
        frames += frame_counts[idx]
    if current:
        batches.append(current)
    return batches


def _ar_sample_loss(model: ArModel, frames, units, ctx) -> Tensor:
    h = model.encode(frames, ctx)
    tokens_in = [model.bos_id] + list(units)
    targets = list(units) + [model.eos_id]
    logp = model.forward_logprobs(tokens_in, h, ctx)
    picked = ad.gather_rows(logp, np.asarray(targets, dtype=np.intp))
    return ad.scale(ad.tmean(picked), -1.0)


@dataclass
class _NarStepStats:
    glanced: int = 0
    glance_skipped: int = 0
    replaced: int = 0
    skipped_infeasible: int = 0


def _nar_sample_loss(
    model: NarModel,
    frames,
    units,
    ctx,
    stage: str,
    cfg: TrainConfig,
    ratio: float,
    sample_seed: int,
    use_glancing: bool,
    stats: _NarStepStats,
) -> Tensor | None:
    t_len = model.cfg.upsample_factor * (frames.shape[0] // 4)
    feasible = t_len >= min_alignment_length(units)
    if stage == "nar-stage1" and not feasible:
        stats.skipped_infeasible += 1
        return None

    h = model.encode(frames, ctx)
    e = model.decoder_input(h)
    if use_glancing and ratio > 0.0:
        if feasible:
            with ad.no_grad():
                first_pass = LogProbLattice(model.forward_lattice(frames).data)
            result = glance(
                e,
                first_pass,
                units,
                ratio,
                sample_seed,
                model.glance_emb,
                position_mode=cfg.glance_position_mode,
                distance_mode=cfg.glance_distance_mode,
            )
            e = result.decoder_input
            stats.glanced += 1
            stats.replaced += result.n_replaced
        else:
            stats.glance_skipped += 1

    lattice_t = model.decode_from_input(e, h, ctx)
    lattice = LogProbLattice(lattice_t.data)
    if stage == "nar-stage2" and len(units) >= 2 and feasible:
        loss_val, grad = nmla_loss_grad(lattice, units, validate=False)
        return ad.external_grad(loss_val, grad, lattice_t)
    if not feasible:
        # Stage 2 keeps infeasible samples on the bigram loss path only when
        # they have bigrams; otherwise nothing can be computed -- skip.
        if len(units) >= 2:
            loss_val, grad = nmla_loss_grad(lattice, units, validate=False)
            return ad.external_grad(loss_val, grad, lattice_t)
        stats.skipped_infeasible += 1
        return None
    loss_val, grad = ctc_loss_grad(lattice, units, validate=False)
    norm = 1.0 / lattice.n_positions  # per-position NLL keeps scales comparable
    return ad.scale(ad.external_grad(loss_val, grad, lattice_t), norm)


def train(
    model: ArModel | NarModel,
    data_dir: str,
    cfg: TrainConfig,
    stage: str,
    out_dir: str,
    steps: int | None = None,
    use_glancing: bool = True,
    checkpoint_name: str | None = None,
    eval_fn=None,
) -> TrainResult:
    """Run one training stage and write a checkpoint plus a metrics log.

    The metrics log has one tab-separated line per step: step, stage, loss,
    lr for the AR stage, plus glance_ratio and n_replaced_mean for the
    parallel stages. Aborts when the loss goes NaN or exceeds 10x its
    first-epoch mean.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}, expected one of {STAGES}")
    os.makedirs(out_dir, exist_ok=True)
    feats, units = load_split(data_dir, "train")
    frame_counts = [f.shape[0] for f in feats]

    if stage == "nar-stage2":
        n_steps = cfg.stage2_steps if steps is None else steps
        peak, warmup = cfg.stage2_peak_lr, cfg.stage2_warmup
    else:
        n_steps = cfg.stage1_steps if steps is None else steps
        peak, warmup = cfg.stage1_peak_lr, cfg.stage1_warmup
    sched = cfg.schedule()

    params = model.named_parameters()
    optimizer = Adam(params, cfg)
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    drop_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 13]))
    dropout = model.cfg.dropout

    log_path = os.path.join(out_dir, f"{stage}.log")
    valid_path = os.path.join(out_dir, f"{stage}.valid.log")
    if cfg.valid_interval and eval_fn and os.path.exists(valid_path):
        os.remove(valid_path)
    ckpt_name = checkpoint_name or f"{stage}.ckpt"
    ckpt_path = os.path.join(out_dir, ckpt_name)

    step = 0
    epoch = 0
    first_epoch_losses: list[float] = []
    first_epoch_mean = None
    losses: list[float] = []
    skipped_infeasible = 0
    glance_skipped = 0
    with open(log_path, "w", encoding="ascii") as log:
        while step < n_steps:
            for batch in _batches(len(feats), frame_counts, cfg.batch_frames, order_rng):
                if step >= n_steps:
                    break
                step += 1
                lr = learning_rate(step, peak, warmup)
                if stage == "nar-stage2":
                    ratio = cfg.stage2_glance_ratio
                else:
                    ratio = ratio_at(step - 1, sched)
                ctx = RunContext(dropout, drop_rng) if dropout > 0 else None

                model.zero_grad()
                stats = _NarStepStats()
                sample_losses: list[Tensor] = []
                for idx in batch:
                    if stage == "ar":
                        sample_losses.append(_ar_sample_loss(model, feats[idx], units[idx], ctx))
                    else:
                        seed = (cfg.seed * 1_000_003 + step) ^ idx
                        loss_t = _nar_sample_loss(
                            model,
                            feats[idx],
                            units[idx],
                            ctx,
                            stage,
                            cfg,
                            ratio,
                            seed,
                            use_glancing,
                            stats,
                        )
                        if loss_t is not None:
                            sample_losses.append(loss_t)
                skipped_infeasible += stats.skipped_infeasible
                glance_skipped += stats.glance_skipped
                if not sample_losses:
                    continue
                inv = 1.0 / len(sample_losses)
                batch_loss = 0.0
                for loss_t in sample_losses:
                    loss_t.backward(inv)
                    batch_loss += loss_t.item() * inv
                clip_gradients(params, cfg.grad_clip)
                optimizer.step(lr)
                losses.append(batch_loss)

                if math.isnan(batch_loss) or (
                    first_epoch_mean is not None
                    and batch_loss > DIVERGENCE_FACTOR * first_epoch_mean
                ):
                    raise TrainingDivergedError(
                        f"{stage} diverged at step {step}: loss {batch_loss:.4g} "
                        f"(first-epoch mean {first_epoch_mean})"
                    )
                if first_epoch_mean is None:
                    first_epoch_losses.append(batch_loss)

                if stage == "ar":
                    log.write(f"{step}\t{stage}\t{batch_loss:.6f}\t{lr:.8f}\n")
                else:
                    mean_rep = stats.replaced / max(1, stats.glanced)
                    log.write(
                        f"{step}\t{stage}\t{batch_loss:.6f}\t{lr:.8f}"
                        f"\t{ratio:.4f}\t{mean_rep:.3f}\n"
                    )
                if cfg.valid_interval and step % cfg.valid_interval == 0 and eval_fn:
                    with open(valid_path, "a", encoding="ascii") as vf:
                        vf.write(f"{step}\t{eval_fn(model):.6f}\n")
            else:
                epoch += 1
                if first_epoch_mean is None and first_epoch_losses:
                    first_epoch_mean = sum(first_epoch_losses) / len(first_epoch_losses)
                continue
            break

    save_checkpoint(ckpt_path, model)
    if skipped_infeasible:
        logger.info("%s: skipped %d infeasible samples", stage, skipped_infeasible)
    return TrainResult(
        stage=stage,
        steps=step,
        final_loss=losses[-1] if losses else float("nan"),
        checkpoint_path=ckpt_path,
        skipped_infeasible=skipped_infeasible,
        glance_skipped=glance_skipped,
        losses=losses,
    )


# ---------------------------------------------------------------------------
# sequence-level knowledge distillation


@dataclass
class DistillReport:
    n_samples: int
    n_empty_kept_original: int
    out_dir: str


def distill(teacher: ArModel, data_dir: str, out_dir: str) -> DistillReport:
    """Re-target the train split with the teacher's greedy decodes.

    Features files are referenced unchanged (copied alongside); an empty
    teacher output keeps the original target and is counted. Valid/test
    splits pass through untouched.
    """
    os.makedirs(out_dir, exist_ok=True)
    manifest = read_manifest(os.path.join(data_dir, "manifest.tsv"))
    new_rows = []
    n_empty = 0
    n_train = 0
    for split, feat_rel, unit_rel, count in manifest:
        src_feat = os.path.join(data_dir, feat_rel)
        dst_feat = os.path.join(out_dir, feat_rel)
        _copy_file(src_feat, dst_feat)
        if split == "train":
            feats, originals = load_split(data_dir, split)
            decoded = []
            for frames, orig in zip(feats, originals):
                hyp, _ = teacher.greedy_decode(frames)
                if not hyp:
                    hyp = orig
                    n_empty += 1
                decoded.append(hyp)
            n_train = len(decoded)
            write_units(os.path.join(out_dir, unit_rel), decoded)
        else:
            _copy_file(os.path.join(data_dir, unit_rel), os.path.join(out_dir, unit_rel))
        new_rows.append((split, feat_rel, unit_rel, count))
    write_manifest(os.path.join(out_dir, "manifest.tsv"), new_rows)
    if n_empty:
        logger.info("distill: kept original target for %d empty decodes", n_empty)
    return DistillReport(n_samples=n_train, n_empty_kept_original=n_empty, out_dir=out_dir)


def _copy_file(src: str, dst: str) -> None:
    with open(src, "rb") as f:
        blob = f.read()
    tmp = f"{dst}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, dst)

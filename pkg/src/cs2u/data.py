"""Synthetic frames-to-units task, dataset file formats, k-means unitizer.

Each sample is a phone string rendered as noisy per-phone embeddings repeated
for a random duration; the target is the phone string (with occasional
adjacent swaps, which introduce mild non-monotonicity) expanded to discrete
units through a fixed per-phone table. Features are written in a small binary
format, units as text lines of space-separated ids, and a manifest ties the
splits together.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .units import format_unit_line, min_alignment_length, parse_unit_line

__all__ = [
    "SynthTaskSpec",
    "GenerationReport",
    "synth_sample",
    "generate_dataset",
    "write_features",
    "read_features",
    "write_units",
    "read_units",
    "write_manifest",
    "read_manifest",
    "load_split",
    "kmeans_fit",
    "kmeans_assign",
]

logger = logging.getLogger(__name__)

FEATURES_MAGIC = b"CS2F"
FEATURES_VERSION = 1

INFEASIBLE_WARN_FRACTION = 0.02


@dataclass
class SynthTaskSpec:
    n_phones: int = 12  # source alphabet size
    feature_dim: int = 8
    n_units: int = 16
    min_duration: int = 2  # frames per phone, inclusive range
    max_duration: int = 5
    min_phones: int = 3
    max_phones: int = 8
    min_units_per_phone: int = 1
    max_units_per_phone: int = 3
    noise_sigma: float = 0.1
    swap_prob: float = 0.15  # per adjacent pair, target side only
    upsample_factor: int = 2  # used for the feasibility statistic
    train_count: int = 512
    valid_count: int = 64
    test_count: int = 64
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.swap_prob <= 0.5:
            raise ValueError(f"swap_prob must be in [0, 0.5], got {self.swap_prob}")
        if self.min_duration < 1 or self.max_duration < self.min_duration:
            raise ValueError("bad duration range")
        if self.min_phones < 1 or self.max_phones < self.min_phones:
            raise ValueError("bad phone-count range")
        if self.min_units_per_phone < 1 or self.max_units_per_phone < self.min_units_per_phone:
            raise ValueError("bad units-per-phone range")


@dataclass
class TaskTables:
    """Deterministic per-task structure: phone embeddings and the expansion
    table covering every phone."""

    phone_embeddings: np.ndarray  # (n_phones, feature_dim)
    expansion: list[list[int]]  # phone id -> unit ids


def build_task_tables(spec: SynthTaskSpec) -> TaskTables:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    emb = rng.standard_normal((spec.n_phones, spec.feature_dim))
    expansion = []
    for _ in range(spec.n_phones):
        n = int(rng.integers(spec.min_units_per_phone, spec.max_units_per_phone + 1))
        expansion.append(rng.integers(0, spec.n_units, size=n).tolist())
    return TaskTables(emb, expansion)


@dataclass
class SynthSample:
    frames: np.ndarray
    units: list[int]
    phones: list[int]
    target_phones: list[int]  # after adjacent swaps


def synth_sample(spec: SynthTaskSpec, tables: TaskTables, sample_id: int) -> SynthSample:
    """Render one sample; fully determined by (spec.seed, sample_id)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, sample_id]))
    n_ph = int(rng.integers(spec.min_phones, spec.max_phones + 1))
    phones = rng.integers(0, spec.n_phones, size=n_ph).tolist()
    durations = rng.integers(spec.min_duration, spec.max_duration + 1, size=n_ph)
    rows = []
    for ph, dur in zip(phones, durations):
        base = tables.phone_embeddings[ph]
        rows.append(base + spec.noise_sigma * rng.standard_normal((dur, spec.feature_dim)))
    frames = np.concatenate(rows, axis=0)
    target = list(phones)
    for i in range(len(target) - 1):
        if rng.random() < spec.swap_prob:
            target[i], target[i + 1] = target[i + 1], target[i]
    units = [u for ph in target for u in tables.expansion[ph]]
    return SynthSample(frames, units, phones, target)


@dataclass
class GenerationReport:
    counts: dict[str, int]
    infeasible_fraction: float  # over the train split, at spec.upsample_factor
    mean_frames_per_phone: float
    warned: bool


def generate_dataset(spec: SynthTaskSpec, out_dir: str) -> GenerationReport:
    """Write train/valid/test splits plus manifest; byte-identical per seed.

    Sample ids are globally disjoint across splits. Warns when more than 2%
    of training samples cannot be aligned at the configured upsample factor.
    """
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    tables = build_task_tables(spec)
    split_sizes = {
        "train": spec.train_count,
        "valid": spec.valid_count,
        "test": spec.test_count,
    }
    next_id = 0
    manifest_rows = []
    infeasible = 0
    total_frames = 0
    total_phones = 0
    for split, count in split_sizes.items():
        samples = [synth_sample(spec, tables, next_id + i) for i in range(count)]
        next_id += count
        feats = [s.frames for s in samples]
        units = [s.units for s in samples]
        feat_path = f"{split}.feats"
        unit_path = f"{split}.units"
        write_features(os.path.join(out_dir, feat_path), feats)
        write_units(os.path.join(out_dir, unit_path), units)
        manifest_rows.append((split, feat_path, unit_path, count))
        for s in samples:
            total_frames += s.frames.shape[0]
            total_phones += len(s.phones)
            if split == "train":
                t_len = spec.upsample_factor * (s.frames.shape[0] // 4)
                if t_len < min_alignment_length(s.units):
                    infeasible += 1
    write_manifest(os.path.join(out_dir, "manifest.tsv"), manifest_rows)
    frac = infeasible / max(1, spec.train_count)
    warned = frac > INFEASIBLE_WARN_FRACTION
    if warned:
        logger.warning(
            "%.1f%% of training samples are CTC-infeasible at upsample factor %d "
            "(threshold %.0f%%); consider a larger factor",
            100 * frac,
            spec.upsample_factor,
            100 * INFEASIBLE_WARN_FRACTION,
        )
    return GenerationReport(
        counts=split_sizes,
        infeasible_fraction=frac,
        mean_frames_per_phone=total_frames / max(1, total_phones),
        warned=warned,
    )


# ---------------------------------------------------------------------------
# file formats


def write_features(path: str, samples: list[np.ndarray]) -> None:
    """Binary features: magic, version, sample count, feature dim; then per
    sample a frame count and the little-endian float64 frame data."""
    if samples:
        dim = samples[0].shape[1]
    else:
        dim = 0
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(FEATURES_MAGIC)
        f.write(struct.pack("<III", FEATURES_VERSION, len(samples), dim))
        for arr in samples:
            if arr.ndim != 2 or arr.shape[1] != dim:
                raise ValueError(f"feature sample of shape {arr.shape}, expected (*, {dim})")
            f.write(struct.pack("<I", arr.shape[0]))
            f.write(np.ascontiguousarray(arr).astype("<f8").tobytes())
    os.replace(tmp, path)


def read_features(path: str) -> list[np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FEATURES_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {FEATURES_MAGIC!r}")
        version, count, dim = struct.unpack("<III", f.read(12))
        if version != FEATURES_VERSION:
            raise ValueError(f"{path}: unsupported features version {version}")
        out = []
        for _ in range(count):
            (n,) = struct.unpack("<I", f.read(4))
            raw = f.read(8 * n * dim)
            if len(raw) != 8 * n * dim:
                raise ValueError(f"{path}: truncated feature record")
            out.append(np.frombuffer(raw, dtype="<f8").reshape(n, dim).copy())
        return out


def write_units(path: str, sequences: list[list[int]]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="ascii") as f:
        for seq in sequences:
            f.write(format_unit_line(seq) + "\n")
    os.replace(tmp, path)


def read_units(path: str) -> list[list[int]]:
    with open(path, encoding="ascii") as f:
        return [parse_unit_line(line) for line in f]


def write_manifest(path: str, rows: list[tuple[str, str, str, int]]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="ascii") as f:
        for split, feat, unit, count in rows:
            f.write(f"{split}\t{feat}\t{unit}\t{count}\n")
    os.replace(tmp, path)


def read_manifest(path: str) -> list[tuple[str, str, str, int]]:
    rows = []
    with open(path, encoding="ascii") as f:
        for line in f:
            split, feat, unit, count = line.rstrip("\n").split("\t")
            rows.append((split, feat, unit, int(count)))
    return rows


def load_split(data_dir: str, split: str) -> tuple[list[np.ndarray], list[list[int]]]:
    manifest = read_manifest(os.path.join(data_dir, "manifest.tsv"))
    for name, feat, unit, count in manifest:
        if name == split:
            feats = read_features(os.path.join(data_dir, feat))
            units = read_units(os.path.join(data_dir, unit))
            if len(feats) != count or len(units) != count:
                raise ValueError(
                    f"{split}: manifest says {count} samples, found "
                    f"{len(feats)} features / {len(units)} unit lines"
                )
            return feats, units
    raise ValueError(f"split {split!r} not in manifest {path_for_error(data_dir)}")


def path_for_error(data_dir: str) -> str:
    return os.path.join(data_dir, "manifest.tsv")


def manifest_checksum(data_dir: str) -> str:
    """Checksum over the manifest and every file it references."""
    h = hashlib.sha256()
    manifest_path = os.path.join(data_dir, "manifest.tsv")
    with open(manifest_path, "rb") as f:
        h.update(f.read())
    for _, feat, unit, _ in read_manifest(manifest_path):
        for rel in (feat, unit):
            with open(os.path.join(data_dir, rel), "rb") as f:
                h.update(f.read())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# k-means unitizer


def kmeans_fit(
    points: np.ndarray, n_clusters: int, n_iters: int = 20, seed: int = 0
) -> np.ndarray:
    """Lloyd iterations from a seeded choice of distinct points.

    Assignment ties go to the lowest centroid index; a cluster that loses all
    members keeps its previous centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    distinct = np.unique(points, axis=0)
    if distinct.shape[0] < n_clusters:
        raise ValueError(
            f"need at least {n_clusters} distinct points, got {distinct.shape[0]}"
        )
    rng = np.random.default_rng(seed)
    pick = rng.choice(distinct.shape[0], size=n_clusters, replace=False)
    codebook = distinct[pick].copy()
    for _ in range(n_iters):
        assign = _assign_all(points, codebook)
        for c in range(n_clusters):
            members = points[assign == c]
            if members.shape[0]:
                codebook[c] = members.mean(axis=0)
    return codebook


def _assign_all(points: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    d2 = ((points[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)  # argmin keeps the first (lowest) index on ties


def kmeans_assign(point: np.ndarray, codebook: np.ndarray) -> int:
    point = np.asarray(point, dtype=np.float64)
    d2 = ((codebook - point[None, :]) ** 2).sum(axis=1)
    return int(np.argmin(d2))

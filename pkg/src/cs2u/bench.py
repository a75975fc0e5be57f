"""Decoding latency benchmark: sequential baseline vs one-pass parallel model.

Every test sample is decoded by both models at batch size 1 on a single
worker; wallclock covers the full encode + decode + collapse path around a
monotonic clock, excluding model load. Samples are bucketed by source frame
count and the report carries per-bucket mean times and speedups plus the
iteration accounting (sequential steps per sample, parallel forward passes).
"""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass, field

import numpy as np

from .model import ArModel, NarModel

__all__ = [
    "BucketRow",
    "BenchReport",
    "bench_latency",
    "format_report",
    "report_tsv",
    "DEFAULT_BUCKET_EDGES",
]

# Desk-scale analog of the three source-length buckets; configurable.
DEFAULT_BUCKET_EDGES = (120.0, 240.0)


@dataclass
class BucketRow:
    lo: float
    hi: float | None  # None = unbounded
    count: int
    ar_mean_s: float | None
    nar_mean_s: float | None
    speedup: float | None

    def label(self) -> str:
        hi = "inf" if self.hi is None else f"{self.hi:g}"
        return f"[{self.lo:g}, {hi})"


@dataclass
class BenchReport:
    rows: list[BucketRow]
    overall_speedup: float
    n_samples: int
    n_warmup: int
    hardware: str
    ar_steps_equal_output_len: bool
    nar_single_forward: bool
    ar_truncated: int
    ar_decoder_calls: int = 0
    ar_total_steps: int = 0


def _decode_timed(model, frames: np.ndarray) -> tuple[float, dict]:
    """Dispatch on the model variant; returns (seconds, accounting)."""
    if isinstance(model, ArModel):
        t0 = time.perf_counter()
        units, meta = model.greedy_decode(frames)
        dt = time.perf_counter() - t0
        return dt, {
            "units": units,
            "steps": meta.steps,
            "calls": meta.decoder_calls,
            "truncated": meta.truncated,
        }
    t0 = time.perf_counter()
    units, n_forward = model.greedy_units(frames)
    dt = time.perf_counter() - t0
    return dt, {"units": units, "forward": n_forward}


def _bucket_of(bounds, n: int) -> int:
    for i, (lo, hi) in enumerate(bounds):
        if n >= lo and (hi is None or n < hi):
            return i
    return len(bounds) - 1


def bench_latency(
    ar_model: ArModel | NarModel,
    nar_model: ArModel | NarModel,
    features: list[np.ndarray],
    bucket_edges: tuple[float, ...] = DEFAULT_BUCKET_EDGES,
    n_warmup: int = 3,
) -> BenchReport:
    """Time both models over the test features, bucketed by frame count.

    Each model decodes the whole set in its own pass (after its own warmup)
    so the two timings never interleave and cannot disturb each other.
    """
    if not features:
        raise ValueError("no samples to benchmark")
    edges = tuple(sorted(bucket_edges))
    bounds = [(0.0, edges[0])]
    bounds += [(edges[i], edges[i + 1]) for i in range(len(edges) - 1)]
    bounds.append((edges[-1], None))

    ar_times: list[list[float]] = [[] for _ in bounds]
    nar_times: list[list[float]] = [[] for _ in bounds]
    steps_ok = True
    single_ok = True
    truncated = 0
    total_calls = 0
    total_steps = 0

    for frames in features[: min(n_warmup, len(features))]:
        _decode_timed(ar_model, frames)
    for frames in features:
        ar_dt, ar_acc = _decode_timed(ar_model, frames)
        ar_times[_bucket_of(bounds, frames.shape[0])].append(ar_dt)
        if "steps" in ar_acc:
            steps_ok &= ar_acc["steps"] == len(ar_acc["units"])
            truncated += int(ar_acc["truncated"])
            total_calls += ar_acc["calls"]
            total_steps += ar_acc["steps"]
        if "forward" in ar_acc:
            single_ok &= ar_acc["forward"] == 1

    for frames in features[: min(n_warmup, len(features))]:
        _decode_timed(nar_model, frames)
    for frames in features:
        nar_dt, nar_acc = _decode_timed(nar_model, frames)
        nar_times[_bucket_of(bounds, frames.shape[0])].append(nar_dt)
        if "steps" in nar_acc:
            steps_ok &= nar_acc["steps"] == len(nar_acc["units"])
            total_calls += nar_acc["calls"]
            total_steps += nar_acc["steps"]
        if "forward" in nar_acc:
            single_ok &= nar_acc["forward"] == 1

    rows = []
    for (lo, hi), at, nt in zip(bounds, ar_times, nar_times):
        if at:
            ar_mean = sum(at) / len(at)
            nar_mean = sum(nt) / len(nt)
            speedup = ar_mean / nar_mean if nar_mean > 0 else None
        else:
            ar_mean = nar_mean = speedup = None
        rows.append(BucketRow(lo, hi, len(at), ar_mean, nar_mean, speedup))
    total_ar = sum(sum(t) for t in ar_times)
    total_nar = sum(sum(t) for t in nar_times)
    overall = total_ar / total_nar if total_nar > 0 else float("nan")
    hardware = (
        f"{platform.system()} {platform.machine()} CPU, python {platform.python_version()}"
        " (desk-scale wallclock; not comparable across machines)"
    )
    return BenchReport(
        rows=rows,
        overall_speedup=overall,
        n_samples=len(features),
        n_warmup=min(n_warmup, len(features)),
        hardware=hardware,
        ar_steps_equal_output_len=steps_ok,
        nar_single_forward=single_ok,
        ar_truncated=truncated,
        ar_decoder_calls=total_calls,
        ar_total_steps=total_steps,
    )


def format_report(report: BenchReport) -> str:
    lines = [
        f"# hardware: {report.hardware}",
        f"# samples: {report.n_samples}  warmup-discarded: {report.n_warmup}",
        f"# ar truncated decodes: {report.ar_truncated}",
        f"{'frames':>14} {'count':>6} {'ar mean (ms)':>13} {'nar mean (ms)':>14} {'speedup':>8}",
    ]
    for row in report.rows:
        if row.count == 0:
            lines.append(f"{row.label():>14} {0:>6} {'-':>13} {'-':>14} {'-':>8}")
        else:
            lines.append(
                f"{row.label():>14} {row.count:>6} {1e3 * row.ar_mean_s:>13.2f} "
                f"{1e3 * row.nar_mean_s:>14.2f} {row.speedup:>7.2f}x"
            )
    lines.append(f"{'overall':>14} {report.n_samples:>6} {'':>13} {'':>14} {report.overall_speedup:>7.2f}x")
    return "\n".join(lines)


def report_tsv(report: BenchReport) -> str:
    lines = ["lo\thi\tcount\tar_mean_s\tnar_mean_s\tspeedup"]
    for row in report.rows:
        hi = "" if row.hi is None else f"{row.hi:g}"
        if row.count == 0:
            lines.append(f"{row.lo:g}\t{hi}\t0\t\t\t")
        else:
            lines.append(
                f"{row.lo:g}\t{hi}\t{row.count}\t{row.ar_mean_s:.6f}"
                f"\t{row.nar_mean_s:.6f}\t{row.speedup:.4f}"
            )
    lines.append(f"overall\t\t{report.n_samples}\t\t\t{report.overall_speedup:.4f}")
    return "\n".join(lines)

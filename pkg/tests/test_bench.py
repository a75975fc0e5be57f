"""Latency benchmark: bucketing, self-comparison band, iteration accounting."""

import dataclasses

import numpy as np
import pytest

from cs2u.bench import bench_latency, format_report, report_tsv
from cs2u.model import ArModel, ModelConfig, NarModel

CFG = ModelConfig(
    n_encoder_layers=1,
    n_decoder_layers=1,
    d_model=16,
    n_heads=2,
    n_units=6,
    feature_dim=4,
    upsample_factor=2,
    dropout=0.0,
    max_positions=256,
)


@pytest.fixture(scope="module")
def models():
    ar = ArModel(dataclasses.replace(CFG, variant="ar"), seed=0)
    nar = NarModel(dataclasses.replace(CFG), seed=1)
    return ar, nar


@pytest.fixture(scope="module")
def features():
    rng = np.random.default_rng(7)
    return [rng.standard_normal((n, 4)) for n in (8, 10, 25, 30, 60, 70, 9, 28, 65)]


def test_report_buckets_and_counts(models, features):
    ar, nar = models
    report = bench_latency(ar, nar, features, bucket_edges=(20.0, 50.0), n_warmup=1)
    assert [row.count for row in report.rows] == [3, 3, 3]
    assert report.n_samples == 9
    for row in report.rows:
        assert row.speedup is not None and row.speedup > 0
    assert report.overall_speedup > 0


def test_empty_bucket_row_is_emitted(models, features):
    ar, nar = models
    report = bench_latency(ar, nar, features, bucket_edges=(1000.0, 2000.0), n_warmup=1)
    assert report.rows[0].count == 9
    assert report.rows[1].count == 0 and report.rows[1].speedup is None
    assert report.rows[2].count == 0


def test_iteration_accounting(models, features):
    ar, nar = models
    report = bench_latency(ar, nar, features, bucket_edges=(20.0, 50.0), n_warmup=1)
    assert report.ar_steps_equal_output_len
    assert report.nar_single_forward
    assert report.ar_decoder_calls >= report.ar_total_steps


def test_self_comparison_stays_in_noise_band(features):
    nar = NarModel(dataclasses.replace(CFG), seed=3)
    report = bench_latency(nar, nar, features * 3, bucket_edges=(20.0, 50.0), n_warmup=3)
    for row in report.rows:
        if row.count:
            assert 0.8 <= row.speedup <= 1.25
    assert 0.8 <= report.overall_speedup <= 1.25


def test_report_formatting(models, features):
    ar, nar = models
    report = bench_latency(ar, nar, features, bucket_edges=(20.0, 50.0), n_warmup=1)
    text = format_report(report)
    assert "hardware" in text
    assert "speedup" in text
    tsv = report_tsv(report)
    lines = tsv.splitlines()
    assert lines[0].startswith("lo\thi\tcount")
    assert len(lines) == 1 + 3 + 1  # header, three buckets, overall


def test_rejects_empty_sample_list(models):
    ar, nar = models
    with pytest.raises(ValueError):
        bench_latency(ar, nar, [])

"""Synthetic task generation, file formats, and the k-means unitizer."""

import dataclasses
import logging
import os

import numpy as np
import pytest

from cs2u.data import (
    SynthTaskSpec,
    build_task_tables,
    generate_dataset,
    kmeans_assign,
    kmeans_fit,
    load_split,
    manifest_checksum,
    read_features,
    read_manifest,
    read_units,
    synth_sample,
    write_features,
    write_units,
)

TINY = SynthTaskSpec(train_count=24, valid_count=8, test_count=8, seed=3)


def test_generation_is_byte_identical(tmp_path):
    a = os.path.join(tmp_path, "a")
    b = os.path.join(tmp_path, "b")
    generate_dataset(dataclasses.replace(TINY), a)
    generate_dataset(dataclasses.replace(TINY), b)
    assert manifest_checksum(a) == manifest_checksum(b)


def test_different_seed_changes_data(tmp_path):
    a = os.path.join(tmp_path, "a")
    b = os.path.join(tmp_path, "b")
    generate_dataset(dataclasses.replace(TINY), a)
    generate_dataset(dataclasses.replace(TINY, seed=4), b)
    assert manifest_checksum(a) != manifest_checksum(b)


def test_no_swap_targets_are_deterministic_in_phones():
    spec = dataclasses.replace(TINY, swap_prob=0.0)
    tables = build_task_tables(spec)
    for sid in range(20):
        s = synth_sample(spec, tables, sid)
        assert s.target_phones == s.phones
        want = [u for ph in s.phones for u in tables.expansion[ph]]
        assert s.units == want


def test_swaps_only_reorder_phones():
    spec = dataclasses.replace(TINY, swap_prob=0.5)
    tables = build_task_tables(spec)
    for sid in range(20):
        s = synth_sample(spec, tables, sid)
        assert sorted(s.target_phones) == sorted(s.phones)


def test_frame_counts_match_durations():
    tables = build_task_tables(TINY)
    for sid in range(10):
        s = synth_sample(TINY, tables, sid)
        assert TINY.min_duration * len(s.phones) <= s.frames.shape[0]
        assert s.frames.shape[0] <= TINY.max_duration * len(s.phones)
        assert s.frames.shape[1] == TINY.feature_dim


def test_mean_frames_per_phone_close_to_midpoint():
    # Uniform durations over {2..5} have mean 3.5; check the law of large
    # numbers on the default spec over 10k samples.
    spec = SynthTaskSpec(seed=11)
    tables = build_task_tables(spec)
    frames = 0
    phones = 0
    for sid in range(10_000):
        s = synth_sample(spec, tables, sid)
        frames += s.frames.shape[0]
        phones += len(s.phones)
    mean = frames / phones
    assert 2.0 <= mean <= 5.0
    assert abs(mean - 3.5) < 0.1


def test_expansion_table_covers_alphabet():
    tables = build_task_tables(TINY)
    assert len(tables.expansion) == TINY.n_phones
    for units in tables.expansion:
        assert TINY.min_units_per_phone <= len(units) <= TINY.max_units_per_phone
        assert all(0 <= u < TINY.n_units for u in units)


def test_generated_dataset_loads_and_counts(tmp_path):
    out = os.path.join(tmp_path, "d")
    report = generate_dataset(dataclasses.replace(TINY), out)
    assert report.counts == {"train": 24, "valid": 8, "test": 8}
    for split, count in report.counts.items():
        feats, units = load_split(out, split)
        assert len(feats) == len(units) == count
    rows = read_manifest(os.path.join(out, "manifest.tsv"))
    assert [r[0] for r in rows] == ["train", "valid", "test"]


def test_splits_are_disjoint(tmp_path):
    out = os.path.join(tmp_path, "d")
    generate_dataset(dataclasses.replace(TINY), out)
    seen = set()
    for split in ("train", "valid", "test"):
        feats, _ = load_split(out, split)
        for arr in feats:
            key = arr.tobytes()
            assert key not in seen
            seen.add(key)


def test_infeasibility_warning_fires(tmp_path, caplog):
    # upsample factor 1 starves T far below the minimum alignment length
    spec = dataclasses.replace(TINY, upsample_factor=1, max_units_per_phone=3)
    with caplog.at_level(logging.WARNING):
        report = generate_dataset(spec, os.path.join(tmp_path, "d"))
    assert report.infeasible_fraction > 0.02
    assert report.warned
    assert any("infeasible" in r.message for r in caplog.records)


def test_features_round_trip(tmp_path, rng):
    path = os.path.join(tmp_path, "x.feats")
    samples = [rng.standard_normal((n, 5)) for n in (3, 1, 7)]
    write_features(path, samples)
    back = read_features(path)
    assert len(back) == 3
    for a, b in zip(samples, back):
        assert np.array_equal(a, b)


def test_features_magic_guard(tmp_path):
    path = os.path.join(tmp_path, "bad.feats")
    with open(path, "wb") as f:
        f.write(b"XXXX" + b"\x00" * 12)
    with pytest.raises(ValueError):
        read_features(path)


def test_units_file_round_trip(tmp_path):
    path = os.path.join(tmp_path, "u.units")
    seqs = [[1, 2, 3], [], [7]]
    write_units(path, seqs)
    assert read_units(path) == seqs
    # empty line in the middle survives as the empty sequence
    text = open(path).read()
    assert text.splitlines()[1] == ""


def test_load_split_unknown_split(tmp_path):
    out = os.path.join(tmp_path, "d")
    generate_dataset(dataclasses.replace(TINY), out)
    with pytest.raises(ValueError):
        load_split(out, "dev")


# ---------------------------------------------------------------------------
# k-means


def test_kmeans_exact_clusters(rng):
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    points = np.repeat(centers, 5, axis=0)
    codebook = kmeans_fit(points, 3, n_iters=1, seed=0)
    got = {tuple(row) for row in codebook}
    assert got == {tuple(row) for row in centers}


def test_kmeans_assign_centroid_to_itself(rng):
    codebook = rng.standard_normal((4, 3))
    for i in range(4):
        assert kmeans_assign(codebook[i], codebook) == i


def test_kmeans_assign_tie_goes_to_lowest_index():
    codebook = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert kmeans_assign(np.array([0.0, 0.0]), codebook) == 0


def test_kmeans_objective_non_increasing(rng):
    points = rng.standard_normal((200, 4))

    def objective(codebook):
        d2 = ((points[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=2)
        return float(d2.min(axis=1).sum())

    prev = None
    for iters in range(1, 8):
        codebook = kmeans_fit(points, 5, n_iters=iters, seed=1)
        obj = objective(codebook)
        if prev is not None:
            assert obj <= prev + 1e-9
        prev = obj


def test_kmeans_needs_distinct_points():
    points = np.ones((10, 2))
    with pytest.raises(ValueError):
        kmeans_fit(points, 2)


def test_kmeans_deterministic(rng):
    points = rng.standard_normal((50, 3))
    a = kmeans_fit(points, 4, seed=9)
    b = kmeans_fit(points, 4, seed=9)
    assert np.array_equal(a, b)

"""Synthetic generator, split protocols, and dataset serialization."""

import hashlib

import numpy as np
import pytest

from muss.core import UnitDataset
from muss.synth import (
    DAY_SECONDS,
    GeneratorConfig,
    chunked_split,
    chunked_split_labels,
    dataset_csv_bytes,
    generate,
    mean_flow,
    read_dataset,
    sample_observation,
    sample_unit,
    sequential_fewshot_sequence,
    unit_physics,
    write_dataset,
)

from conftest import make_unit


class TestSampleUnit:
    def test_deterministic(self):
        a = sample_unit(np.random.default_rng(5))
        b = sample_unit(np.random.default_rng(5))
        assert a == b

    def test_flow_coefficient_positive(self, rng):
        assert all(sample_unit(rng).flow_coefficient > 0 for _ in range(200))

    def test_flow_coefficient_median_near_one(self):
        rng = np.random.default_rng(77)
        draws = np.array([sample_unit(rng).flow_coefficient for _ in range(100_000)])
        assert abs(np.median(draws) - 1.0) < 0.02

    def test_ranges(self, rng):
        for _ in range(200):
            phys = sample_unit(rng)
            assert 0.5 <= phys.choke_exponent <= 1.5
            assert 0.0 <= phys.gaslift_gain <= 0.5
            assert 0.0 <= phys.temperature_gain <= 0.2
            assert 0.01 <= phys.noise_std <= 0.05


class TestSampleObservation:
    def test_minimum_opening_bounds_flow(self, rng):
        from muss.synth import UnitPhysics

        phys = UnitPhysics(1.3, 1.5, 0.5, 0.2, 0.01)
        x = np.array([0.05, 1.0, 0.1, 1.0, 0.0, 0.0, 1.0])
        bound = 1.3 * 0.05**1.5 * np.sqrt(0.9) * 1.5 * 1.1
        assert mean_flow(phys, x) <= bound + 1e-12

    def test_zero_pressure_drop_means_noise_only(self, rng):
        phys = sample_unit(rng)
        x = np.array([0.5, 0.6, 0.6, 0.5, 0.2, 0.3, 0.1])
        assert mean_flow(phys, x) == 0.0

    def test_opening_monotone(self, rng):
        phys = sample_unit(rng)
        base = np.array([0.2, 0.8, 0.3, 0.5, 0.2, 0.3, 0.4])
        values = []
        for u in np.linspace(0.05, 1.0, 9):
            x = base.copy()
            x[0] = u
            values.append(mean_flow(phys, x))
        assert np.all(np.diff(values) > 0)

    def test_feature_ranges(self, rng):
        phys = sample_unit(rng)
        for _ in range(300):
            obs = sample_observation(phys, rng, 0)
            assert np.all(obs.x >= 0.0) and np.all(obs.x <= 1.0)
            assert obs.x[2] <= obs.x[1]  # downstream pressure below wellhead
            assert -0.5 <= obs.y <= 3.0


class TestGenerate:
    def test_timestamps_sorted(self):
        data = generate(GeneratorConfig(n_units=4, seed=3, points_median=60))
        for unit in data:
            assert np.all(np.diff(unit.timestamps) >= 0)

    def test_deterministic_bytes(self):
        cfg = GeneratorConfig(n_units=4, seed=12, points_median=50)
        b1 = dataset_csv_bytes(generate(cfg))
        b2 = dataset_csv_bytes(generate(cfg))
        assert b1 == b2

    def test_golden_hash_reference_seed(self):
        # determinism regression pin on a reference seed
        cfg = GeneratorConfig(n_units=3, seed=2024, points_median=40)
        digest = hashlib.sha256(dataset_csv_bytes(generate(cfg))).hexdigest()
        assert digest == GOLDEN_SHA256

    def test_point_counts_within_bounds(self):
        data = generate(GeneratorConfig(n_units=16, seed=1, points_median=40, points_min=30))
        for unit in data:
            assert 30 <= len(unit) <= 3000

    def test_noise_free_target_is_deterministic_in_x(self):
        cfg = GeneratorConfig(n_units=2, seed=9, points_median=40)
        data = generate(cfg)
        physics = unit_physics(cfg)
        for unit, phys in zip(data, physics):
            means = np.array([mean_flow(phys, unit.x[j]) for j in range(len(unit))])
            # observed = mean + noise, and noise is bounded by clipping
            resid = unit.y - np.clip(means, -0.5, 3.0)
            assert np.std(resid) < 6 * phys.noise_std

    def test_units_differ_at_equal_features(self):
        cfg = GeneratorConfig(n_units=2, seed=10, points_median=40)
        p1, p2 = unit_physics(cfg)
        x = np.array([0.7, 0.9, 0.2, 0.5, 0.1, 0.2, 0.3])
        f1, f2 = mean_flow(p1, x), mean_flow(p2, x)
        assert f1 != f2
        # with equal shape parameters the ratio would be k1/k2; check the
        # actual ratio at matched non-flow-coefficient physics
        from muss.synth import UnitPhysics

        q1 = UnitPhysics(p1.flow_coefficient, 1.0, 0.2, 0.1, 0.02)
        q2 = UnitPhysics(p2.flow_coefficient, 1.0, 0.2, 0.1, 0.02)
        assert mean_flow(q1, x) / mean_flow(q2, x) == pytest.approx(
            p1.flow_coefficient / p2.flow_coefficient, rel=1e-12
        )


class TestChunkedSplit:
    def test_partition_is_exact(self):
        data = generate(GeneratorConfig(n_units=6, seed=4, points_median=200))
        labels = chunked_split_labels(data, seed=1)
        for unit, lab in zip(data, labels):
            assert lab.shape == (len(unit),)
            assert np.all((lab >= 0) & (lab <= 2))

    def test_fraction_targets_on_large_dataset(self):
        data = generate(GeneratorConfig(n_units=32, seed=5, points_median=320))
        assert data.total_points >= 10_000
        labels = chunked_split_labels(data, seed=2)
        counts = np.zeros(3)
        for lab in labels:
            for s in range(3):
                counts[s] += int(np.sum(lab == s))
        fractions = counts / counts.sum()
        for got, want in zip(fractions, (0.81, 0.14, 0.05)):
            assert abs(got - want) <= 0.03

    def test_chunks_stay_together(self):
        data = generate(GeneratorConfig(n_units=5, seed=6, points_median=150))
        labels = chunked_split_labels(data, chunk_days=30, seed=3)
        for unit, lab in zip(data, labels):
            chunk_ids = unit.timestamps // (30 * DAY_SECONDS)
            for chunk in np.unique(chunk_ids):
                members = lab[chunk_ids == chunk]
                assert len(set(members.tolist())) == 1

    def test_apply_split_partitions_each_unit(self):
        data = generate(GeneratorConfig(n_units=4, seed=7, points_median=100))
        train, val, test = chunked_split(data, seed=4)
        for i, unit in enumerate(data):
            n = len(train.units[i]) + len(val.units[i]) + len(test.units[i])
            assert n == len(unit)
        assert train.unit_ids == data.unit_ids


def _daily_unit(n, spacing_days):
    x = np.tile(np.linspace(0.1, 0.9, 7), (n, 1))
    y = np.linspace(0.2, 1.0, n)
    ts = np.arange(n) * spacing_days * DAY_SECONDS
    return UnitDataset("seq", x, y, ts)


class TestSequentialProtocol:
    def test_weekly_spacing_picks_every_point(self):
        unit = _daily_unit(6, spacing_days=7)
        steps = sequential_fewshot_sequence(unit, n_max=10)
        assert [s.train_index for s in steps] == [0, 1, 2, 3, 4]
        for s in steps:
            # the following week is empty; the single next point is used
            assert s.test_indices.tolist() == [s.train_index + 1]

    def test_daily_spacing_picks_weekly_and_windows_hold_six(self):
        unit = _daily_unit(30, spacing_days=1)
        steps = sequential_fewshot_sequence(unit, n_max=10)
        assert [s.train_index for s in steps][:4] == [0, 7, 14, 21]
        for s in steps[:3]:
            assert s.test_indices.tolist() == list(
                range(s.train_index + 1, s.train_index + 7)
            )

    def test_single_observation_gives_empty_sequence(self):
        unit = _daily_unit(1, spacing_days=1)
        assert sequential_fewshot_sequence(unit) == []

    def test_picks_at_least_a_week_apart(self, rng):
        ts = np.sort(rng.integers(0, 400 * DAY_SECONDS, size=120))
        unit = UnitDataset("r", np.zeros((120, 7)), np.zeros(120), ts)
        steps = sequential_fewshot_sequence(unit, n_max=10)
        picks = [int(unit.timestamps[s.train_index]) for s in steps]
        assert all(b - a >= 7 * DAY_SECONDS for a, b in zip(picks, picks[1:]))

    def test_respects_n_max(self):
        unit = _daily_unit(200, spacing_days=1)
        assert len(sequential_fewshot_sequence(unit, n_max=10)) == 10


class TestCsvRoundTrip:
    def test_exact_round_trip(self, tmp_path):
        data = generate(GeneratorConfig(n_units=3, seed=8, points_median=40))
        labels = chunked_split_labels(data, seed=5)
        path = tmp_path / "data.csv"
        write_dataset(path, data, labels)
        loaded, loaded_labels = read_dataset(path)
        assert loaded.unit_ids == data.unit_ids
        for a, b in zip(loaded, data):
            assert np.array_equal(a.x, b.x)
            assert np.array_equal(a.y, b.y)
            assert np.array_equal(a.timestamps, b.timestamps)
        for a, b in zip(loaded_labels, labels):
            assert np.array_equal(a, b)

    def test_rewrite_is_byte_identical(self, tmp_path):
        data = generate(GeneratorConfig(n_units=2, seed=9, points_median=35))
        labels = chunked_split_labels(data, seed=6)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_dataset(p1, data, labels)
        loaded, loaded_labels = read_dataset(p1)
        write_dataset(p2, loaded, loaded_labels)
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_validation(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError):
            read_dataset(path)


# computed once from this generator at the reference seed; guards against
# accidental changes to the sampling order
GOLDEN_SHA256 = "318267d84716801c309f3db51ecb9e03f0dab367d290bdc9bdc144002487ca30"

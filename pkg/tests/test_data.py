"""Synthetic data generation and the two partitioners."""

import struct

import numpy as np
import pytest

from svdlab import data
from svdlab.errors import InvalidConfig


class TestMakeSynthetic:
    def test_deterministic(self):
        a = data.make_synthetic(4, 20, 8, seed=5)
        b = data.make_synthetic(4, 20, 8, seed=5)
        assert all(
            np.array_equal(x.input, y.input) and x.label == y.label
            for x, y in zip(a.examples, b.examples)
        )

    def test_counts(self):
        ds = data.make_synthetic(4, 50, 8, seed=1)
        assert len(ds.examples) == 200
        for c in range(4):
            assert sum(1 for ex in ds.examples if ex.label == c) == 50

    def test_range_and_dims(self):
        ds = data.make_synthetic(3, 5, 10, seed=2)
        assert ds.input_dim == 100
        for ex in ds.examples:
            assert ex.input.shape == (100,)
            assert np.all(ex.input >= 0.0) and np.all(ex.input <= 1.0)

    def test_template_separation(self):
        # every pair of class templates differs by >= 0.2 mean abs pixels
        templates = [data.class_template(c, 8) for c in range(12)]
        for i in range(len(templates)):
            for j in range(i + 1, len(templates)):
                assert np.mean(np.abs(templates[i] - templates[j])) >= 0.2

    def test_validation(self):
        with pytest.raises(InvalidConfig):
            data.make_synthetic(1, 5, 8, seed=0)
        with pytest.raises(InvalidConfig):
            data.make_synthetic(3, 5, 3, seed=0)


class TestPartitionRho:
    def test_keeps_everything_at_one(self):
        ds = data.make_synthetic(4, 10, 8, seed=3)
        part = data.partition_rho(ds, 1.0, seed=1)
        assert sorted(part.client_shards[0]) == list(range(40))

    def test_decay_counts(self):
        # N = (8, 8, 8) at rho = 0.5 keeps (8, 4, 2) along the shuffled order
        ds = data.make_synthetic(3, 8, 8, seed=4)
        part = data.partition_rho(ds, 0.5, seed=9)
        assert sorted(part.balance_profile[0].tolist()) == [2, 4, 8]
        assert len(part.client_shards[0]) == 14

    def test_ceil_keeps_every_class(self):
        ds = data.make_synthetic(5, 6, 8, seed=5)
        part = data.partition_rho(ds, 0.1, seed=2)
        assert np.all(part.balance_profile[0] >= 1)

    def test_deterministic(self):
        ds = data.make_synthetic(4, 12, 8, seed=6)
        p1 = data.partition_rho(ds, 0.4, seed=7)
        p2 = data.partition_rho(ds, 0.4, seed=7)
        assert p1.client_shards == p2.client_shards

    def test_monotone_in_rho(self):
        ds = data.make_synthetic(4, 16, 8, seed=8)
        totals = [
            len(data.partition_rho(ds, rho, seed=3).client_shards[0])
            for rho in np.linspace(0.1, 1.0, 10)
        ]
        assert all(a <= b for a, b in zip(totals, totals[1:]))

    def test_rejects_bad_rho(self):
        ds = data.make_synthetic(2, 4, 8, seed=0)
        for rho in (0.0, 1.2, -0.5):
            with pytest.raises(InvalidConfig):
                data.partition_rho(ds, rho, seed=0)


class TestPartitionDirichlet:
    def test_disjoint_and_complete(self):
        ds = data.make_synthetic(5, 100, 8, seed=0)
        for seed in range(5):
            part = data.partition_dirichlet(ds, 10, 0.5, seed=seed)
            merged = sorted(i for s in part.client_shards for i in s)
            assert merged == list(range(500))
            assert all(len(s) >= 1 for s in part.client_shards)

    def test_concentrated_alpha_balances(self):
        ds = data.make_synthetic(4, 40, 8, seed=1)
        part = data.partition_dirichlet(ds, 2, 1e6, seed=4)
        for profile in part.balance_profile:
            assert np.all(np.abs(profile - 20) <= 2)

    def test_alpha_half_imbalance(self):
        # moderate alpha should leave most clients visibly class-skewed
        ds = data.make_synthetic(5, 100, 8, seed=2)
        skewed_fractions = []
        for seed in range(20):
            part = data.partition_dirichlet(ds, 10, 0.5, seed=100 + seed)
            skewed = 0
            for profile in part.balance_profile:
                lo = max(int(profile.min()), 1)
                if profile.max() / lo > 2.0:
                    skewed += 1
            skewed_fractions.append(skewed / len(part.client_shards))
        assert np.mean(skewed_fractions) >= 0.5

    def test_deterministic(self):
        ds = data.make_synthetic(3, 30, 8, seed=3)
        p1 = data.partition_dirichlet(ds, 4, 0.5, seed=11)
        p2 = data.partition_dirichlet(ds, 4, 0.5, seed=11)
        assert p1.client_shards == p2.client_shards

    def test_too_many_clients(self):
        ds = data.make_synthetic(2, 2, 8, seed=0)
        with pytest.raises(InvalidConfig):
            data.partition_dirichlet(ds, 5, 0.5, seed=0)


class TestPartitionRhoClients:
    def test_shards_disjoint(self):
        ds = data.make_synthetic(4, 40, 8, seed=9)
        part = data.partition_rho_clients(ds, 4, 0.5, seed=3)
        merged = [i for s in part.client_shards for i in s]
        assert len(merged) == len(set(merged))
        assert len(part.client_shards) == 4

    def test_rho_one_covers_everything(self):
        ds = data.make_synthetic(3, 30, 8, seed=10)
        part = data.partition_rho_clients(ds, 3, 1.0, seed=5)
        merged = sorted(i for s in part.client_shards for i in s)
        assert merged == list(range(90))


class TestIdxLoader:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(7, 5, 5), dtype=np.uint8)
        labels = rng.integers(0, 3, size=7, dtype=np.uint8)
        img_path = tmp_path / "images.idx"
        lab_path = tmp_path / "labels.idx"
        with open(img_path, "wb") as fh:
            fh.write(struct.pack(">IIII", 2051, 7, 5, 5))
            fh.write(images.tobytes())
        with open(lab_path, "wb") as fh:
            fh.write(struct.pack(">II", 2049, 7))
            fh.write(labels.tobytes())
        ds = data.load_idx(img_path, lab_path)
        assert len(ds.examples) == 7
        assert ds.side == 5
        np.testing.assert_allclose(
            ds.examples[0].input, images[0].reshape(25) / 255.0
        )

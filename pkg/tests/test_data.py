import collections

import numpy as np
import pytest

from fedbed.data import (
    PartitionError,
    PartitionPlan,
    dirichlet_partition,
    load_dataset,
    save_dataset,
    synth_dataset,
    train_val_split,
)
from fedbed.model import ModelSpec, TrainConfig, init_model, local_train, evaluate


def label_histogram(ds):
    return collections.Counter(ds.labels.tolist())


def multiset(ds):
    return collections.Counter(
        (tuple(row), int(y)) for row, y in zip(ds.features.tolist(), ds.labels.tolist())
    )


class TestSynthDataset:
    def test_counts_and_balance(self):
        ds = synth_dataset(3, 16, 200, seed=0)
        assert len(ds) == 600
        assert ds.features.shape == (600, 16)
        assert label_histogram(ds) == {0: 200, 1: 200, 2: 200}

    def test_deterministic(self):
        a = synth_dataset(4, 8, 50, seed=9)
        b = synth_dataset(4, 8, 50, seed=9)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_separable_blobs_trainable_centrally(self):
        # centralized-training oracle: well-spread blobs reach >=99% train acc
        ds = synth_dataset(3, 8, 100, seed=4, mean_scale=4.0, noise_sigma=0.5)
        spec = ModelSpec((8, 3), "none")
        params = init_model(spec, 0)
        for _ in range(5):
            params, _, _ = local_train(params, spec, ds, TrainConfig(1, 16, 0.5, seed=1))
        _, acc = evaluate(params, spec, ds)
        assert acc >= 0.99


class TestDirichletPartition:
    def test_exact_cover(self):
        ds = synth_dataset(4, 6, 60, seed=3)
        parts = dirichlet_partition(ds, PartitionPlan(5, alpha=0.5, seed=7))
        assert len(parts) == 5
        combined = collections.Counter()
        for p in parts:
            combined += multiset(p)
        assert combined == multiset(ds)

    def test_single_client_gets_everything(self):
        ds = synth_dataset(3, 4, 30, seed=1)
        (only,) = dirichlet_partition(ds, PartitionPlan(1, alpha=1.0, seed=0))
        assert multiset(only) == multiset(ds)

    def test_no_empty_clients_even_when_skewed(self):
        ds = synth_dataset(2, 4, 10, seed=5)
        for seed in range(10):
            parts = dirichlet_partition(ds, PartitionPlan(8, alpha=0.05, seed=seed))
            assert all(len(p) >= 1 for p in parts)

    def test_more_clients_than_samples_rejected(self):
        ds = synth_dataset(2, 4, 2, seed=5)  # 4 samples
        with pytest.raises(PartitionError):
            dirichlet_partition(ds, PartitionPlan(5, alpha=1.0, seed=0))

    def test_huge_alpha_approaches_uniform(self):
        # statistical check over 10 seeds: each client's class histogram is
        # within 10% relative of the uniform share
        failures = 0
        for seed in range(10):
            ds = synth_dataset(4, 4, 200, seed=seed)
            parts = dirichlet_partition(ds, PartitionPlan(4, alpha=1e9, seed=seed))
            for p in parts:
                hist = label_histogram(p)
                for c in range(4):
                    share = hist.get(c, 0)
                    if abs(share - 50) > 5:  # 10% of the uniform 50
                        failures += 1
        assert failures == 0

    def test_determinism(self):
        ds = synth_dataset(3, 4, 50, seed=2)
        a = dirichlet_partition(ds, PartitionPlan(4, alpha=1.0, seed=3))
        b = dirichlet_partition(ds, PartitionPlan(4, alpha=1.0, seed=3))
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.features, pb.features)
            assert np.array_equal(pa.labels, pb.labels)

    def test_iid_sizes_near_equal(self):
        ds = synth_dataset(3, 4, 67, seed=2)  # 201 samples
        parts = dirichlet_partition(ds, PartitionPlan(4, alpha=None, seed=3))
        sizes = sorted(len(p) for p in parts)
        assert sizes == [50, 50, 50, 51]

    def test_alpha_controls_distance_to_global(self):
        # mean total-variation distance to the global label distribution
        # shrinks as alpha grows
        def mean_tv(alpha):
            dists = []
            for seed in range(10):
                ds = synth_dataset(5, 4, 400, seed=seed)
                parts = dirichlet_partition(ds, PartitionPlan(10, alpha=alpha, seed=seed))
                global_p = np.full(5, 1 / 5)
                for p in parts:
                    hist = np.bincount(p.labels, minlength=5) / len(p)
                    dists.append(0.5 * np.abs(hist - global_p).sum())
            return np.mean(dists)

        tvs = [mean_tv(a) for a in (0.1, 1.0, 10.0, 1000.0)]
        assert all(a >= b for a, b in zip(tvs, tvs[1:])), tvs
        assert tvs[0] > 0.3 and tvs[-1] < 0.05


class TestTrainValSplit:
    def test_80_20(self):
        ds = synth_dataset(2, 4, 50, seed=0)  # 100 samples
        train, val = train_val_split(ds, 0.2, seed=1)
        assert len(train) == 80 and len(val) == 20

    def test_deterministic_and_exact_cover(self):
        ds = synth_dataset(3, 4, 40, seed=0)
        t1, v1 = train_val_split(ds, 0.25, seed=9)
        t2, v2 = train_val_split(ds, 0.25, seed=9)
        assert np.array_equal(t1.features, t2.features)
        assert np.array_equal(v1.features, v2.features)
        assert multiset(t1) + multiset(v1) == multiset(ds)

    def test_empty_side_rejected(self):
        ds = synth_dataset(2, 4, 1, seed=0)  # 2 samples
        with pytest.raises(PartitionError):
            train_val_split(ds, 0.05, seed=0)

    def test_val_proportions_track_train(self):
        # hand-rolled chi-square over 10 seeds: compare val class counts to
        # the proportions observed in train; df = (C-1) * 10 = 20,
        # critical value at p=0.001 is 45.3
        stat = 0.0
        for seed in range(10):
            ds = synth_dataset(3, 4, 400, seed=seed)
            train, val = train_val_split(ds, 0.25, seed=seed)
            train_p = np.bincount(train.labels, minlength=3) / len(train)
            observed = np.bincount(val.labels, minlength=3)
            expected = train_p * len(val)
            stat += float(((observed - expected) ** 2 / np.maximum(expected, 1e-9)).sum())
        assert stat < 45.3, stat


class TestShardFiles:
    def test_roundtrip(self, tmp_path):
        ds = synth_dataset(3, 5, 20, seed=6)
        path = tmp_path / "shard.bin"
        save_dataset(path, ds)
        back = load_dataset(path)
        assert np.array_equal(back.features, ds.features)
        assert np.array_equal(back.labels, ds.labels)
        assert back.num_classes == ds.num_classes

    def test_truncation_detected(self, tmp_path):
        ds = synth_dataset(2, 3, 10, seed=6)
        path = tmp_path / "shard.bin"
        save_dataset(path, ds)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(ValueError):
            load_dataset(path)

"""
Tests for the toy datasets, the background prefetcher and the sample
statistics.
"""
import itertools
import threading
import time

import numpy as np
import pytest

from datasets import (KINDS, energy_distance, make_toy_dataset, prefetch, principal_basis,
                      project)
from tensor import ConfigError


def _fails_after(n):
    yield from range(n)
    raise RuntimeError("producer broke")


class TestToyDatasets:
    @pytest.mark.parametrize("kind", KINDS)
    def test_standardized_channels(self, kind):
        data = make_toy_dataset(kind, 2048, seed=3)
        assert data.images.shape == (2048, 1, 8, 8)
        assert 0.8 <= float(data.channel_variance()[0]) <= 1.2
        assert abs(float(data.images.mean())) < 0.1

    @pytest.mark.parametrize("kind", KINDS)
    def test_deterministic(self, kind):
        a, b = make_toy_dataset(kind, 64, seed=1), make_toy_dataset(kind, 64, seed=1)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert not np.array_equal(a.images, make_toy_dataset(kind, 64, seed=2).images)

    def test_label_ranges(self):
        for kind in KINDS:
            data = make_toy_dataset(kind, 512)
            assert set(np.unique(data.labels)) <= set(range(data.num_classes))

    def test_blobs_are_balanced(self):
        counts = np.bincount(make_toy_dataset("two_class_blobs", 101).labels)
        assert counts.tolist() == [51, 50]

    def test_mixture_classes_are_separated(self):
        data = make_toy_dataset("gaussian_mixture", 400)
        means = np.stack([data.images[data.labels == c].mean(0).ravel() for c in range(4)])
        within = np.mean([data.images[data.labels == c].std(0).mean() for c in range(4)])
        gaps = [np.linalg.norm(means[i] - means[j]) for i, j in itertools.combinations(range(4), 2)]
        assert min(gaps) > 3 * within

    def test_channels_and_size(self):
        data = make_toy_dataset("checkerboard", 32, size=16, channels=4)
        assert data.images.shape == (32, 4, 16, 16)

    def test_bad_arguments(self):
        with pytest.raises(ConfigError):
            make_toy_dataset("spirals", 10)
        with pytest.raises(ConfigError):
            make_toy_dataset("checkerboard", 0)


class TestBatches:
    def test_epochs_cover_the_dataset(self):
        data = make_toy_dataset("gaussian_mixture", 12)
        stream = data.batches(4, np.random.default_rng(0))
        seen = np.concatenate([next(stream)[1] for _ in range(3)])
        assert sorted(seen.tolist()) == sorted(data.labels.tolist())

    def test_batch_larger_than_dataset(self):
        data = make_toy_dataset("gaussian_mixture", 4)
        with pytest.raises(ConfigError):
            next(data.batches(8, np.random.default_rng(0)))


class TestPrefetch:
    def test_preserves_order(self):
        assert list(prefetch(iter(range(50)), depth=3)) == list(range(50))

    def test_propagates_producer_errors(self):
        def failing():
            yield 1
            raise RuntimeError("producer broke")

        stream = prefetch(failing())
        assert next(stream) == 1
        with pytest.raises(RuntimeError, match="producer broke"):
            next(stream)

    def test_endless_source_can_be_abandoned(self):
        stream = prefetch(itertools.count(), depth=1)
        assert [next(stream) for _ in range(5)] == [0, 1, 2, 3, 4]
        stream.close()

    @pytest.mark.parametrize("source", [
        lambda: iter(range(4)),
        lambda: _fails_after(2),
    ], ids=["finite", "failing"])
    def test_worker_exits_when_consumer_leaves_a_full_queue(self, source):
        before = set(threading.enumerate())
        stream = prefetch(source(), depth=1)
        assert next(stream) == 0
        workers = [t for t in threading.enumerate()
                   if t not in before and t.name == "prefetch"]
        time.sleep(0.2)
        stream.close()
        for t in workers:
            t.join(timeout=2.0)
            assert not t.is_alive()


class TestStatistics:
    def test_energy_distance_properties(self, rng):
        a = rng.standard_normal((200, 2))
        shifted = a + np.array([3.0, 0.0])
        assert energy_distance(a, a) == pytest.approx(0.0, abs=1e-12)
        assert energy_distance(a, shifted) > 1.0
        assert energy_distance(a, shifted) == pytest.approx(energy_distance(shifted, a))

    def test_principal_basis_finds_dominant_axis(self, rng):
        samples = rng.standard_normal((500, 3)) * np.array([5.0, 1.0, 0.1])
        basis = principal_basis(samples, k=1)
        assert abs(basis[0, 0]) > 0.99
        assert project(samples.reshape(500, 3, 1, 1), basis).shape == (500, 1)

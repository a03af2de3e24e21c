"""
Datasets module for the DiG desk implementation.
Synthetic latent-shaped datasets for desk-scale training, a background
prefetcher, and the sample-quality statistics used to judge samplers.
"""
import logging
import queue
import threading
from dataclasses import dataclass

import numpy as np

from tensor import ConfigError

logger = logging.getLogger(__name__)

KINDS = ("gaussian_mixture", "checkerboard", "two_class_blobs")
NUM_CLASSES = {"gaussian_mixture": 4, "checkerboard": 2, "two_class_blobs": 2}
REFERENCE_SIZE = 4096


@dataclass
class ToyDataset:
    """Standardized images [n, C, I, I] with integer labels [n]."""

    kind: str
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def channel_variance(self):
        return self.images.var(axis=(0, 2, 3))

    def batches(self, batch_size, rng):
        """Endless shuffled epochs of (images, labels) batches."""
        n = len(self)
        if batch_size > n:
            raise ConfigError(f"batch size {batch_size} exceeds dataset size {n}")
        while True:
            order = rng.permutation(n)
            for start in range(0, n - batch_size + 1, batch_size):
                idx = order[start:start + batch_size]
                yield self.images[idx], self.labels[idx]


def _smooth_patterns(rng, count, channels, size):
    """Low-frequency random patterns, unit RMS each."""
    coords = (np.arange(size) + 0.5) / size
    basis = np.stack([np.cos(np.pi * k * coords) for k in range(3)])
    coef = rng.standard_normal((count, channels, 3, 3))
    patterns = np.einsum("ncij,iy,jx->ncyx", coef, basis, basis)
    rms = np.sqrt((patterns ** 2).mean(axis=(1, 2, 3), keepdims=True))
    return patterns / rms


def _structure(kind, size, channels, structure_seed):
    rng = np.random.default_rng([structure_seed, KINDS.index(kind)])
    if kind == "gaussian_mixture":
        return {"templates": 1.5 * _smooth_patterns(rng, 4, channels, size)}
    if kind == "checkerboard":
        u, w = _smooth_patterns(rng, 2, channels, size)
        flat = np.stack([u.ravel(), w.ravel()])
        q, _ = np.linalg.qr(flat.T)
        return {"axes": q.T.reshape(2, channels, size, size) * np.sqrt(u.size)}
    yy, xx = np.mgrid[0:size, 0:size]
    return {"grid": (yy, xx), "centres": ((size * 0.3, size * 0.3), (size * 0.7, size * 0.7))}


def _draw(kind, n, rng, structure, size, channels):
    if kind == "gaussian_mixture":
        labels = rng.integers(0, 4, n)
        noise = rng.standard_normal((n, channels, size, size))
        return structure["templates"][labels] + 0.3 * noise, labels
    if kind == "checkerboard":
        a = rng.uniform(-2.0, 2.0, n)
        b = rng.uniform(0.0, 1.0, n) - 2.0 * rng.integers(0, 2, n) + np.floor(a) % 2
        labels = ((np.floor(a) + np.floor(b)) % 2).astype(np.int64)
        u, w = structure["axes"]
        noise = rng.standard_normal((n, channels, size, size))
        images = a[:, None, None, None] * u + b[:, None, None, None] * w
        return images + 0.05 * noise, labels
    labels = rng.permutation(np.arange(n) % 2)
    yy, xx = structure["grid"]
    centres = np.asarray(structure["centres"])[labels]
    centres = centres + rng.uniform(-1.0, 1.0, (n, 2))
    amplitude = rng.uniform(0.8, 1.2, n)
    d2 = ((yy[None] - centres[:, 0, None, None]) ** 2
          + (xx[None] - centres[:, 1, None, None]) ** 2)
    blob = amplitude[:, None, None] * np.exp(-d2 / (2 * (size / 8) ** 2))
    images = np.repeat(blob[:, None], channels, axis=1)
    return images + 0.1 * rng.standard_normal(images.shape), labels


def make_toy_dataset(kind, n, seed=0, size=8, channels=1, structure_seed=0):
    """Deterministic synthetic dataset; per-channel standardized.

    The distribution (templates, axes, blob centres) and the standardization
    depend on `structure_seed` only, so datasets with different `seed` are
    draws from one distribution.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown dataset kind {kind!r}; choose from {', '.join(KINDS)}")
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    structure = _structure(kind, size, channels, structure_seed)
    reference, _ = _draw(kind, REFERENCE_SIZE,
                         np.random.default_rng([structure_seed, 99]), structure, size, channels)
    mu = reference.mean(axis=(0, 2, 3), keepdims=True)
    sigma = reference.std(axis=(0, 2, 3), keepdims=True)
    images, labels = _draw(kind, n, np.random.default_rng(seed), structure, size, channels)
    images = (images - mu) / sigma
    logger.debug("made %s dataset: n=%d, size=%d, channels=%d", kind, n, size, channels)
    return ToyDataset(kind, images, labels.astype(np.int64), NUM_CLASSES[kind])


_DONE = object()


def prefetch(batches, depth=2):
    """Yield items of `batches` produced ahead of time on a daemon thread."""
    handoff = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def offer(item):
        """Put unless the consumer has gone; False once it has."""
        while not stop.is_set():
            try:
                handoff.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def worker():
        try:
            for item in batches:
                if not offer(item):
                    return
        except Exception as exc:  # surfaced in the consumer
            offer(exc)
            return
        offer(_DONE)

    thread = threading.Thread(target=worker, name="prefetch", daemon=True)
    thread.start()
    try:
        while True:
            item = handoff.get()
            if item is _DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()


def principal_basis(samples, k=2):
    """Top-k principal directions of flattened samples, [k, features]."""
    flat = samples.reshape(len(samples), -1)
    centred = flat - flat.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    return vt[:k]


def project(samples, basis):
    return samples.reshape(len(samples), -1) @ basis.T


def energy_distance(a, b):
    """2 E|X - Y| - E|X - X'| - E|Y - Y'| between two point clouds."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)

    def mean_dist(x, y):
        return float(np.sqrt(((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)).mean())

    return 2 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)

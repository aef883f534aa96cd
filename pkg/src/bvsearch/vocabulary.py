"""Binary visual words: k-means under Hamming distance with thresholded centroids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import (
    BinaryDescriptor,
    ConfigurationError,
    UsageError,
    _as_words,
    cdist_hamming,
    check_descriptors,
    pack_bits,
    unpack_bits,
)


@dataclass(frozen=True)
class TrainingConfig:
    n_words: int = 1024
    max_iterations: int = 25
    seed: int = 0
    convergence: float = 0.001

    def __post_init__(self):
        if self.n_words < 2:
            raise ConfigurationError(f"n_words must be >= 2, got {self.n_words}")
        if self.max_iterations < 1:
            raise ConfigurationError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not 0 <= self.convergence < 1:
            raise ConfigurationError(f"convergence must lie in [0, 1), got {self.convergence}")


@dataclass(eq=False)
class Vocabulary:
    """N binary centroids, packed as an (N, n_bits // 8) uint8 array."""

    centroids: np.ndarray
    n_bits: int

    def __post_init__(self):
        self.centroids = check_descriptors(self.centroids, self.n_bits)
        if len(self.centroids) < 2:
            raise ConfigurationError(f"a vocabulary needs at least 2 words, got {len(self.centroids)}")
        self.centroids.setflags(write=False)

    @property
    def n_words(self) -> int:
        return len(self.centroids)

    def __eq__(self, other):
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return self.n_bits == other.n_bits and np.array_equal(self.centroids, other.centroids)

    def centroid(self, w: int) -> BinaryDescriptor:
        return BinaryDescriptor(self.centroids[w].tobytes(), self.n_bits)

    def distances(self, X: np.ndarray) -> np.ndarray:
        X = check_descriptors(X, self.n_bits)
        return cdist_hamming(X, self.centroids)

    def quantize_batch(self, X: np.ndarray) -> np.ndarray:
        """Nearest word id per packed descriptor; ties go to the lowest id."""
        X = check_descriptors(X, self.n_bits)
        if len(X) == 0:
            return np.zeros(0, dtype=np.int64)
        return cdist_hamming(X, self.centroids).argmin(axis=1)


def quantize(d: BinaryDescriptor, v: Vocabulary) -> int:
    if d.n_bits != v.n_bits:
        raise UsageError(f"descriptor width {d.n_bits} does not match vocabulary width {v.n_bits}")
    return int(v.quantize_batch(d.to_array().reshape(1, -1))[0])


def _threshold_means(bits: np.ndarray, labels: np.ndarray, n_words: int):
    """Per-cluster bit counts and sizes; centroid bit is 1 iff 2*count >= size."""
    order = np.argsort(labels, kind="stable")
    sizes = np.bincount(labels, minlength=n_words)
    counts = np.zeros((n_words, bits.shape[1]), dtype=np.int64)
    nonempty = np.flatnonzero(sizes)
    if len(nonempty):
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])[nonempty]
        counts[nonempty] = np.add.reduceat(bits[order].astype(np.int64), starts, axis=0)
    centroid_bits = (2 * counts >= sizes[:, None]).astype(np.uint8)
    return centroid_bits, sizes


def _kmeanspp(Xw: np.ndarray, n_words: int, rng: np.random.Generator) -> np.ndarray:
    n = len(Xw)
    chosen = [int(rng.integers(n))]
    closest = np.bitwise_count(Xw ^ Xw[chosen[0]]).sum(-1).astype(np.float64)
    for _ in range(1, n_words):
        weights = closest ** 2
        total = weights.sum()
        if total <= 0:
            # every point coincides with a chosen centroid; fall back to unused points
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(remaining))
        else:
            idx = int(rng.choice(n, p=weights / total))
        chosen.append(idx)
        np.minimum(closest, np.bitwise_count(Xw ^ Xw[idx]).sum(-1), out=closest)
    return np.array(chosen)


def train(descriptors, cfg: TrainingConfig = TrainingConfig(), n_bits: int | None = None) -> Vocabulary:
    """Lloyd iterations under Hamming distance, centroids thresholded at 0.5."""
    return BinaryKMeans(
        n_words=cfg.n_words, max_iter=cfg.max_iterations, tol=cfg.convergence, random_state=cfg.seed
    ).fit(descriptors, n_bits=n_bits).vocabulary_


class BinaryKMeans(ClusterMixin, TransformerMixin, BaseEstimator):
    """k-means over packed binary descriptors.

    Assignment uses Hamming distance; each centroid is the per-bit mean of
    its cluster rounded at 0.5 (a mean of exactly 0.5 gives 1).  Seeding is
    k-means++ with Hamming distance.  An empty cluster is re-seeded with the
    point farthest from its own centroid.

    Parameters
    ----------
    n_words : int
        Number of visual words.
    max_iter : int
        Maximum number of Lloyd iterations.
    tol : float
        Stop when the fraction of points changing cluster drops below this.
    random_state : int
        Seed for the k-means++ draw.

    Attributes
    ----------
    vocabulary_ : Vocabulary
    labels_ : ndarray of shape (n_samples,)
        Cluster of each training point; the centroids are the thresholded
        means of exactly these clusters.
    n_iter_ : int
    """

    def __init__(self, n_words=1024, max_iter=25, tol=0.001, random_state=0):
        self.n_words = n_words
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None, n_bits=None):
        cfg = TrainingConfig(self.n_words, self.max_iter, self.random_state, self.tol)
        X = check_descriptors(X, n_bits)
        if len(X) == 0:
            raise ConfigurationError("cannot train a vocabulary on an empty descriptor set")
        if len(X) < cfg.n_words:
            raise ConfigurationError(
                f"need at least n_words={cfg.n_words} training descriptors, got {len(X)}"
            )
        n_bits = X.shape[1] * 8
        rng = np.random.default_rng(cfg.seed)
        bits = unpack_bits(X)
        Xw = _as_words(X)

        centroids = X[_kmeanspp(Xw, cfg.n_words, rng)].copy()
        labels = None
        n_iter = 0
        for n_iter in range(1, cfg.max_iterations + 1):
            dist = cdist_hamming(X, centroids)
            new_labels = dist.argmin(axis=1)
            changed = 1.0 if labels is None else float(np.mean(new_labels != labels))
            labels = new_labels
            centroid_bits, sizes = _threshold_means(bits, labels, cfg.n_words)
            centroids = pack_bits(centroid_bits)
            empty = np.flatnonzero(sizes == 0)
            if len(empty):
                own = dist[np.arange(len(X)), labels]
                for w, idx in zip(empty, np.argsort(-own, kind="stable")):
                    centroids[w] = X[idx]
            if changed < cfg.convergence and not len(empty):
                break

        self.vocabulary_ = Vocabulary(centroids, n_bits)
        self.labels_ = labels
        self.n_iter_ = n_iter
        return self

    def predict(self, X):
        check_is_fitted(self, "vocabulary_")
        return self.vocabulary_.quantize_batch(X)

    def transform(self, X):
        """Hamming distance from each descriptor to every word."""
        check_is_fitted(self, "vocabulary_")
        return self.vocabulary_.distances(X)

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_

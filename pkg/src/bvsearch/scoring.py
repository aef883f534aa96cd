"""K-nearest-neighbour voting inside posting lists.

Four vote rules are available: idf-squared (``tfidf``), Gaussian weighting
(``gw``), local NBNN ``d_K^2 - d_k^2`` (``lno``) and its scale-free variant
``(d_K / d_k)^2 - 1`` (``lnm``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .core import FeatureSet, Substring, UsageError, rowwise_hamming
from .index import EngineState, IndexEntry, Postings


class Scheme(str, Enum):
    TFIDF = "tfidf"
    GAUSSIAN = "gw"
    LN_ORIGINAL = "lno"
    LN_MODIFIED = "lnm"


@dataclass(frozen=True)
class ScoringConfig:
    scheme: Scheme = Scheme.LN_MODIFIED
    k_neighbors: int = 2
    sigma: float = 9.0
    zero_distance_floor: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.k_neighbors < 1:
            raise UsageError(f"k_neighbors must be >= 1, got {self.k_neighbors}")
        if not self.sigma > 0:  # also rejects NaN
            raise UsageError(f"sigma must be positive, got {self.sigma}")
        if not self.zero_distance_floor > 0:
            raise UsageError(f"zero_distance_floor must be positive, got {self.zero_distance_floor}")


@dataclass(frozen=True)
class FeatureMatch:
    query_feature_index: int
    entry: IndexEntry
    word_id: int
    distance: int
    neighbor_rank: int
    query_x: float = 0.0
    query_y: float = 0.0


def knn_in_posting(q: Substring, postings: Postings | Sequence[IndexEntry], k: int) -> list[tuple[IndexEntry, int]]:
    """The k closest entries to ``q``, nearest first, ties in posting order."""
    if not isinstance(postings, Postings):
        if not postings:
            return []
        postings = list(postings)
        postings = Postings.from_entries(postings, postings[0].substring.n_bits)
    if len(postings) == 0:
        return []
    if postings.t_bits != q.n_bits:
        raise UsageError(f"substring width {q.n_bits} does not match posting width {postings.t_bits}")
    dist = rowwise_hamming(postings.substrings, q.to_array()[None, :])
    order = np.argsort(dist, kind="stable")[:k]
    return [(postings.entry(int(i)), int(dist[i])) for i in order]


def idf(doc_freq: int, n_images: int) -> float:
    return math.log(n_images / doc_freq) if doc_freq > 0 else 0.0


def vote(scheme: Scheme, d: float, d_K: float, cfg: ScoringConfig, idf_w: float = 0.0) -> float:
    """Vote of one neighbour at distance ``d`` when the K-th distance is ``d_K``."""
    if scheme is Scheme.TFIDF:
        return idf_w * idf_w
    if scheme is Scheme.GAUSSIAN:
        return math.exp(-(d * d) / (cfg.sigma * cfg.sigma))
    if scheme is Scheme.LN_ORIGINAL:
        return d_K * d_K - d * d
    # integer literals keep exact arithmetic when Fractions come in
    ratio = d_K / max(d, cfg.zero_distance_floor)
    return max(ratio * ratio - 1, 0)


def score_matches(neighbors: Sequence[tuple[IndexEntry, int]], cfg: ScoringConfig, doc_freq, n_images: int,
                  word_id: int = 0, t_bits: int | None = None,
                  query_feature_index: int = 0) -> list[tuple[int, float, FeatureMatch]]:
    """Votes for one query feature's ascending neighbour list.

    When fewer than K neighbours exist, the K-th distance is taken as the
    substring width ``t_bits``.  Words with zero document frequency cast no
    tf-idf vote.
    """
    if t_bits is None:
        t_bits = neighbors[0][0].substring.n_bits if neighbors else 0
    k = cfg.k_neighbors
    near = list(neighbors)[:k]
    d_K = near[k - 1][1] if len(near) >= k else t_bits
    df = int(doc_freq[word_id]) if doc_freq is not None else 0
    idf_w = idf(df, n_images)
    out = []
    for rank, (entry, d) in enumerate(near, start=1):
        if cfg.scheme is Scheme.TFIDF and df == 0:
            continue
        match = FeatureMatch(query_feature_index, entry, word_id, d, rank)
        out.append((entry.image_id, vote(cfg.scheme, d, d_K, cfg, idf_w), match))
    return out


def vote_array(scheme: Scheme, d: np.ndarray, d_K: np.ndarray, cfg: ScoringConfig,
               idf_w: np.ndarray | None = None) -> np.ndarray:
    """Vectorized counterpart of :func:`vote`."""
    d = np.asarray(d, dtype=np.float64)
    d_K = np.asarray(d_K, dtype=np.float64)
    if scheme is Scheme.TFIDF:
        return np.asarray(idf_w, dtype=np.float64) ** 2
    if scheme is Scheme.GAUSSIAN:
        return np.exp(-(d * d) / (cfg.sigma * cfg.sigma))
    if scheme is Scheme.LN_ORIGINAL:
        return d_K * d_K - d * d
    ratio = d_K / np.maximum(d, cfg.zero_distance_floor)
    return np.maximum(ratio * ratio - 1.0, 0.0)


@dataclass
class VoteTable:
    """Accumulated image scores plus every neighbour record, columnar.

    Row ``i`` of the match arrays describes one (query feature, reference
    entry) pair: ``query_index``, ``image_id``, ``word``, ``distance``,
    ``rank`` (1-based), ``vote``, the query position ``query_xy`` and the
    stored reference position ``ref_xy``.
    """

    scores: np.ndarray
    query_index: np.ndarray
    image_id: np.ndarray
    word: np.ndarray
    distance: np.ndarray
    rank: np.ndarray
    vote: np.ndarray
    query_xy: np.ndarray
    ref_xy: np.ndarray
    posting_pos: np.ndarray
    substrings: np.ndarray

    def __len__(self) -> int:
        return len(self.image_id)

    def ranking(self) -> np.ndarray:
        """Images with a positive score, best first; ties go to the lower id."""
        ids = np.flatnonzero(self.scores > 0)
        return ids[np.lexsort((ids, -self.scores[ids]))]

    def rows_for(self, image_id: int) -> np.ndarray:
        return np.flatnonzero(self.image_id == image_id)

    def feature_matches(self, rows: np.ndarray | None = None) -> list[FeatureMatch]:
        rows = np.arange(len(self)) if rows is None else rows
        t_bits = self.substrings.shape[1] * 8
        out = []
        for i in rows:
            entry = IndexEntry(int(self.image_id[i]), int(self.ref_xy[i, 0]), int(self.ref_xy[i, 1]),
                               Substring(self.substrings[i].tobytes(), t_bits))
            out.append(FeatureMatch(int(self.query_index[i]), entry, int(self.word[i]), int(self.distance[i]),
                                    int(self.rank[i]), float(self.query_xy[i, 0]), float(self.query_xy[i, 1])))
        return out


def neighbor_table(query: FeatureSet, state: EngineState, k: int,
                   encoded: tuple[np.ndarray, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Find the k nearest postings for every query feature.

    ``encoded`` may carry the (words, substrings) pair from ``state.encode``.
    """
    index = state.index
    n_q = len(query)
    words, subs = state.encode(query) if encoded is None else encoded
    offsets = index.offsets
    lo = offsets[words]
    m = offsets[words + 1] - lo
    total = int(m.sum())
    seg = np.repeat(np.arange(n_q), m)
    seg_start = np.cumsum(m) - m
    pos = np.arange(total) - np.repeat(seg_start, m) + np.repeat(lo, m)
    dist = rowwise_hamming(index.substrings[pos], subs[seg]) if total else np.zeros(0, np.int32)
    order = np.lexsort((pos, dist, seg))
    rank = np.arange(total) - seg_start[seg[order]] + 1
    keep = order[rank <= k]
    rank = rank[rank <= k]
    seg_k, dist_k = seg[keep], dist[keep]

    # distance of the k-th neighbour per query feature, or T when the list is short
    d_K = np.full(n_q, float(state.t_bits))
    full = rank == k
    d_K[seg_k[full]] = dist_k[full]
    return {
        "query_index": seg_k,
        "word": words[seg_k],
        "posting_pos": pos[keep],
        "distance": dist_k,
        "rank": rank,
        "d_K": d_K[seg_k],
    }


def search(query: FeatureSet, state: EngineState, cfg: ScoringConfig = ScoringConfig(),
           encoded: tuple[np.ndarray, np.ndarray] | None = None) -> VoteTable:
    """Vote on reference images for every query feature."""
    if query.n_bits != state.n_bits:
        raise UsageError(f"query descriptor width {query.n_bits} does not match engine width {state.n_bits}")
    index = state.index
    nb = neighbor_table(query, state, cfg.k_neighbors, encoded)
    image_id = index.image_ids[nb["posting_pos"]].astype(np.int64)
    idf_w = None
    keep = np.ones(len(image_id), bool)
    if cfg.scheme is Scheme.TFIDF:
        df = index.doc_freq[nb["word"]]
        keep = df > 0
        with np.errstate(divide="ignore"):
            idf_w = np.where(keep, np.log(index.n_images / np.maximum(df, 1)), 0.0)
    votes = vote_array(cfg.scheme, nb["distance"], nb["d_K"], cfg, idf_w)
    votes = np.where(keep, votes, 0.0)
    scores = np.bincount(image_id, weights=votes, minlength=index.n_images)[:index.n_images]
    sel = np.flatnonzero(keep)
    pp = nb["posting_pos"][sel]
    return VoteTable(
        scores=scores,
        query_index=nb["query_index"][sel],
        image_id=image_id[sel],
        word=nb["word"][sel],
        distance=nb["distance"][sel],
        rank=nb["rank"][sel],
        vote=votes[sel],
        query_xy=query.xy[nb["query_index"][sel]].astype(np.float64),
        ref_xy=index.xy[pp].astype(np.float64),
        posting_pos=pp,
        substrings=index.substrings[pp],
    )

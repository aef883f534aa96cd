"""Estimator front end tying vocabulary, dictionary, index and verification together."""

from __future__ import annotations

import os
from typing import Iterable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import FeatureSet, check_descriptors
from .geometry import GVConfig, GVReport, verify
from .index import EngineState, add_image, load, save
from .scoring import ScoringConfig, VoteTable, search
from .substring import DEFAULT_T_BITS, DEFAULT_TH_INIT, DEFAULT_TH_STEP, build_dictionary
from .vocabulary import BinaryKMeans


class VisualSearchEngine(BaseEstimator):
    """Binary-descriptor image search.

    ``fit`` learns the visual words and the substring dictionary from
    training descriptors; ``add_images`` indexes references; ``predict``
    returns the best verified (or, with ``gv="off"``, best voted) reference
    per query, or -1 when none is accepted.

    Parameters
    ----------
    n_words, t_bits, th_init, th_step, max_iter, tol, random_state
        Vocabulary and dictionary training.
    scoring, k_neighbors, sigma
        Vote rule (``"tfidf"``, ``"gw"``, ``"lno"`` or ``"lnm"``) and its knobs.
    gv : {"off", "on", "cc"}
        Geometric verification; ``"cc"`` adds the convexity check.
    top_r, min_inliers, inlier_px, dedup_px, gv_iterations
        Verification knobs.
    """

    def __init__(self, n_words=1024, t_bits=DEFAULT_T_BITS, th_init=DEFAULT_TH_INIT, th_step=DEFAULT_TH_STEP,
                 max_iter=25, tol=0.001, random_state=0, scoring="lnm", k_neighbors=2, sigma=9.0,
                 gv="cc", top_r=3, min_inliers=12, inlier_px=5.0, dedup_px=5.0, gv_iterations=2000):
        self.n_words = n_words
        self.t_bits = t_bits
        self.th_init = th_init
        self.th_step = th_step
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state
        self.scoring = scoring
        self.k_neighbors = k_neighbors
        self.sigma = sigma
        self.gv = gv
        self.top_r = top_r
        self.min_inliers = min_inliers
        self.inlier_px = inlier_px
        self.dedup_px = dedup_px
        self.gv_iterations = gv_iterations

    def fit(self, X, y=None):
        X = check_descriptors(X.descriptors if isinstance(X, FeatureSet) else X)
        km = BinaryKMeans(self.n_words, self.max_iter, self.tol, self.random_state).fit(X)
        dictionary = build_dictionary(X, km.vocabulary_, self.t_bits, self.th_init, self.th_step, words=km.labels_)
        self.state_ = EngineState(km.vocabulary_, dictionary)
        return self

    @classmethod
    def from_state(cls, state: EngineState, **params) -> "VisualSearchEngine":
        est = cls(n_words=state.n_words, t_bits=state.t_bits, **params)
        est.state_ = state
        return est

    @classmethod
    def load(cls, path: str | os.PathLike, **params) -> "VisualSearchEngine":
        return cls.from_state(load(path), **params)

    def save(self, path: str | os.PathLike) -> int:
        check_is_fitted(self, "state_")
        return save(self.state_, path)

    def add_images(self, images: Iterable[FeatureSet]) -> "VisualSearchEngine":
        check_is_fitted(self, "state_")
        for features in images:
            add_image(self.state_.index.n_images, features, self.state_)
        return self

    @property
    def scoring_config(self) -> ScoringConfig:
        return ScoringConfig(self.scoring, self.k_neighbors, self.sigma)

    @property
    def gv_config(self) -> GVConfig | None:
        if self.gv == "off":
            return None
        return GVConfig(top_r=self.top_r, max_iterations=self.gv_iterations, inlier_px=self.inlier_px,
                        min_inliers=self.min_inliers, dedup_px=self.dedup_px, convexity_check=self.gv == "cc",
                        seed=self.random_state)

    def search(self, query: FeatureSet) -> VoteTable:
        check_is_fitted(self, "state_")
        return search(query, self.state_, self.scoring_config)

    def verify(self, query: FeatureSet) -> list[GVReport]:
        votes = self.search(query)
        return verify(votes.ranking(), votes, self.state_, self.gv_config or GVConfig(convexity_check=False))

    def predict(self, queries: Iterable[FeatureSet]) -> np.ndarray:
        out = []
        for q in queries:
            if self.gv == "off":
                ranking = self.search(q).ranking()
                out.append(int(ranking[0]) if len(ranking) else -1)
            else:
                accepted = [r for r in self.verify(q) if r.accepted]
                out.append(accepted[0].image_id if accepted else -1)
        return np.array(out, dtype=np.int64)

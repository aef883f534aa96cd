"""Retrieval metrics, the synthetic benchmark and pipeline timing."""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DEFAULT_N_BITS, FeatureSet, UsageError, pack_bits
from .geometry import GVConfig, GVReport, verify
from .index import EngineState, write_descriptor_file
from .scoring import ScoringConfig, search

FRAME = (640, 480)


# -- metrics ---------------------------------------------------------------

def average_precision(ranking: Sequence[int], relevant: set[int] | int) -> float:
    if isinstance(relevant, (int, np.integer)):
        relevant = {int(relevant)}
    if not relevant:
        raise UsageError("average precision needs at least one relevant item")
    hits, total = 0, 0.0
    for rank, item in enumerate(ranking, start=1):
        if int(item) in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def mean_average_precision(rankings: Sequence[Sequence[int]], gt: Sequence[set[int] | int]) -> float:
    if len(rankings) != len(gt):
        raise UsageError(f"{len(rankings)} rankings but {len(gt)} ground-truth entries")
    if not rankings:
        return 0.0
    return float(np.mean([average_precision(r, g) for r, g in zip(rankings, gt)]))


def _check_scores(positive_scores, negative_scores):
    pos = np.asarray(positive_scores, dtype=np.float64).ravel()
    neg = np.asarray(negative_scores, dtype=np.float64).ravel()
    if not len(pos) or not len(neg):
        raise UsageError("ROC analysis needs at least one positive and one negative score")
    return pos, neg


def roc_curve(positive_scores, negative_scores) -> list[tuple[float, float, float]]:
    """(threshold, tpr, fpr) at every observed score, thresholds ascending.

    A score counts as detected when it is >= the threshold.
    """
    pos, neg = _check_scores(positive_scores, negative_scores)
    thresholds = np.unique(np.concatenate([pos, neg]))
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    tpr = (len(pos) - np.searchsorted(pos_sorted, thresholds, side="left")) / len(pos)
    fpr = (len(neg) - np.searchsorted(neg_sorted, thresholds, side="left")) / len(neg)
    return [(float(t), float(a), float(b)) for t, a, b in zip(thresholds, tpr, fpr)]


def zero_fp_accuracy(positive_scores, negative_scores) -> float:
    """Fraction of positives scoring above every negative."""
    pos, neg = _check_scores(positive_scores, negative_scores)
    return float(np.mean(pos > neg.max()))


# -- synthetic scenes ------------------------------------------------------

@dataclass(frozen=True)
class HomographyJitter:
    rotation_deg: float = 30.0
    scale: tuple[float, float] = (0.7, 1.4)
    translation_px: float = 50.0
    perspective: float = 2e-4

    @classmethod
    def none(cls) -> "HomographyJitter":
        return cls(0.0, (1.0, 1.0), 0.0, 0.0)


@dataclass(frozen=True)
class SyntheticSceneConfig:
    n_images: int = 100
    features_per_image: int = 900
    bit_flip_prob: float = 0.1
    homography_jitter: HomographyJitter = field(default_factory=HomographyJitter)
    feature_dropout_prob: float = 0.0
    seed: int = 0
    n_queries: int = 400
    n_distractors: int = 1000
    n_training: int = 20000
    n_bits: int = DEFAULT_N_BITS

    def __post_init__(self):
        for name in ("bit_flip_prob", "feature_dropout_prob"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise UsageError(f"{name} must lie in [0, 1], got {p}")
        if self.features_per_image < 1:
            raise UsageError(f"features_per_image must be >= 1, got {self.features_per_image}")
        if self.n_images < 1:
            raise UsageError(f"n_images must be >= 1, got {self.n_images}")


@dataclass
class SyntheticBenchmark:
    references: list[FeatureSet]
    queries: list[FeatureSet]
    query_sources: list[int]
    query_homographies: list[np.ndarray]
    distractors: list[FeatureSet]
    training: FeatureSet


def random_features(rng: np.random.Generator, n: int, n_bits: int = DEFAULT_N_BITS) -> FeatureSet:
    w, h = FRAME
    kps = np.empty((n, 4), np.float32)
    kps[:, 0] = rng.uniform(0, w, n)
    kps[:, 1] = rng.uniform(0, h, n)
    kps[:, 2] = rng.uniform(1.0, 8.0, n)
    kps[:, 3] = rng.uniform(0, 2 * np.pi, n)
    descs = rng.integers(0, 256, (n, n_bits // 8), dtype=np.uint8)
    return FeatureSet(kps, descs, n_bits)


def random_homography(rng: np.random.Generator, jitter: HomographyJitter) -> np.ndarray:
    """Similarity plus perspective about the frame centre."""
    cx, cy = FRAME[0] / 2, FRAME[1] / 2
    theta = np.deg2rad(rng.uniform(-jitter.rotation_deg, jitter.rotation_deg))
    s = rng.uniform(*jitter.scale)
    tx, ty = rng.uniform(-jitter.translation_px, jitter.translation_px, 2)
    g, k = rng.uniform(-jitter.perspective, jitter.perspective, 2)
    to_centre = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    back = np.array([[1, 0, cx + tx], [0, 1, cy + ty], [0, 0, 1.0]])
    rot = np.array([[s * np.cos(theta), -s * np.sin(theta), 0], [s * np.sin(theta), s * np.cos(theta), 0], [0, 0, 1]])
    persp = np.array([[1, 0, 0], [0, 1, 0], [g, k, 1.0]])
    return back @ rot @ persp @ to_centre


def flip_bits(rng: np.random.Generator, descriptors: np.ndarray, p: float) -> np.ndarray:
    if p <= 0:
        return descriptors.copy()
    mask = rng.random((descriptors.shape[0], descriptors.shape[1] * 8)) < p
    return descriptors ^ pack_bits(mask)


def make_query(rng: np.random.Generator, source: FeatureSet, cfg: SyntheticSceneConfig) -> tuple[FeatureSet, np.ndarray]:
    H = random_homography(rng, cfg.homography_jitter)
    xy = source.xy.astype(np.float64)
    q = xy @ H[:2, :2].T + H[:2, 2]
    w = xy @ H[2, :2] + H[2, 2]
    moved = q / w[:, None]
    inside = (w > 0) & (moved[:, 0] >= 0) & (moved[:, 0] < FRAME[0]) & (moved[:, 1] >= 0) & (moved[:, 1] < FRAME[1])
    kps = source.keypoints.copy()
    kps[:, :2] = moved
    scale = math.sqrt(abs(np.linalg.det(H[:2, :2])))
    angle = math.atan2(H[1, 0], H[0, 0])
    if scale != 1.0 or angle != 0.0:
        kps[:, 2] *= scale
        kps[:, 3] = np.mod(kps[:, 3] + angle, 2 * np.pi)
    descs = flip_bits(rng, source.descriptors, cfg.bit_flip_prob)
    keep = inside & (rng.random(len(source)) >= cfg.feature_dropout_prob)
    return FeatureSet(kps[keep], descs[keep], source.n_bits), H


def generate_synthetic(cfg: SyntheticSceneConfig) -> SyntheticBenchmark:
    """References, noisy warped queries, unrelated distractors and a training pool."""
    rng = np.random.default_rng(cfg.seed)
    training = random_features(rng, cfg.n_training, cfg.n_bits) if cfg.n_training else FeatureSet.empty(cfg.n_bits)
    refs = [random_features(rng, cfg.features_per_image, cfg.n_bits) for _ in range(cfg.n_images)]
    queries, sources, homs = [], [], []
    for _ in range(cfg.n_queries):
        src = int(rng.integers(cfg.n_images))
        q, H = make_query(rng, refs[src], cfg)
        queries.append(q)
        sources.append(src)
        homs.append(H)
    distractors = [random_features(rng, cfg.features_per_image, cfg.n_bits) for _ in range(cfg.n_distractors)]
    return SyntheticBenchmark(refs, queries, sources, homs, distractors, training)


def write_synthetic(bench: SyntheticBenchmark, out_dir: str | os.PathLike) -> Path:
    """Write descriptor files and ``gt.tsv``; returns the ground-truth path.

    Layout: ``training/``, ``references/``, ``queries/`` (true queries and
    distractors).  Distractors carry ``-`` as their relevant id.
    """
    out = Path(out_dir)
    for sub in ("training", "references", "queries"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    if len(bench.training):
        write_descriptor_file(out / "training" / "train_00000.bfds", bench.training)
    for i, ref in enumerate(bench.references):
        write_descriptor_file(out / "references" / f"ref_{i:05d}.bfds", ref)
    lines = []
    for i, (q, src) in enumerate(zip(bench.queries, bench.query_sources)):
        name = f"queries/query_{i:05d}.bfds"
        write_descriptor_file(out / name, q)
        lines.append(f"{name}\t{src}")
    for i, d in enumerate(bench.distractors):
        name = f"queries/distractor_{i:05d}.bfds"
        write_descriptor_file(out / name, d)
        lines.append(f"{name}\t-")
    gt = out / "gt.tsv"
    gt.write_text("".join(line + "\n" for line in lines))
    return gt


def read_ground_truth(path: str | os.PathLike) -> dict[str, int | None]:
    """``query_path -> relevant image id`` (``None`` for distractors); paths resolved against the file."""
    path = Path(path)
    out: dict[str, int | None] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            name, rel = line.split("\t")
        except ValueError:
            raise UsageError(f"{path}:{lineno}: expected 'query_path<TAB>relevant_image_id'") from None
        out[str((path.parent / name).resolve())] = None if rel.strip() == "-" else int(rel)
    return out


# -- running the benchmark -------------------------------------------------

@dataclass
class TimingReport:
    """Wall-clock seconds per stage for one query (the median-total repetition)."""

    quantize: float
    hamming: float
    gv: float
    total: float
    repeats: int = 1

    def as_dict(self) -> dict[str, float]:
        return {"quantize": self.quantize, "hamming": self.hamming, "gv": self.gv, "total": self.total}


@dataclass
class QueryResult:
    ranking: np.ndarray
    scores: np.ndarray
    reports: list[GVReport] | None
    timing: TimingReport


def run_query(query: FeatureSet, state: EngineState, scoring: ScoringConfig,
              gv: GVConfig | None = None) -> QueryResult:
    t0 = time.perf_counter()
    encoded = state.encode(query)
    t1 = time.perf_counter()
    votes = search(query, state, scoring, encoded)
    ranking = votes.ranking()
    t2 = time.perf_counter()
    reports = verify(ranking, votes, state, gv) if gv is not None else None
    t3 = time.perf_counter()
    timing = TimingReport(t1 - t0, t2 - t1, t3 - t2, t3 - t0)
    return QueryResult(ranking, votes.scores, reports, timing)


def timing_report(query: FeatureSet, state: EngineState, scoring: ScoringConfig = ScoringConfig(),
                  gv: GVConfig | None = None, repeats: int = 5) -> TimingReport:
    """Per-stage durations of the repetition whose total is the median."""
    runs = [run_query(query, state, scoring, gv).timing for _ in range(max(1, repeats))]
    runs.sort(key=lambda t: t.total)
    mid = runs[(len(runs) - 1) // 2]
    return TimingReport(mid.quantize, mid.hamming, mid.gv, mid.total, len(runs))


@dataclass
class BenchmarkReport:
    scheme: str
    gv_mode: str
    map: float
    top1_recall: float
    accepted_true: int
    accepted_distractors: int
    zero_fp_accuracy: float
    roc: list[tuple[float, float, float]]
    positive_scores: np.ndarray
    negative_scores: np.ndarray
    timing: dict[str, float]
    n_queries: int
    n_distractors: int

    def summary(self) -> dict[str, float | int | str]:
        out = {
            "scheme": self.scheme, "gv": self.gv_mode, "n_queries": self.n_queries,
            "n_distractors": self.n_distractors, "map": round(self.map, 6),
            "top1_recall": round(self.top1_recall, 6), "zero_fp_accuracy": round(self.zero_fp_accuracy, 6),
            "accepted_true": self.accepted_true, "accepted_distractors": self.accepted_distractors,
        }
        out.update({f"time_{k}_median": round(v, 6) for k, v in self.timing.items()})
        return out


def _best_report(reports: list[GVReport]) -> GVReport | None:
    accepted = [r for r in reports if r.accepted]
    return accepted[0] if accepted else None


def evaluate(state: EngineState, queries: Sequence[FeatureSet], relevant: Sequence[int | None],
             scoring: ScoringConfig = ScoringConfig(), gv: GVConfig | None = None,
             gv_mode: str = "off") -> BenchmarkReport:
    """Run every query; ``relevant[i] is None`` marks a distractor.

    With verification, a query's positive score is the final score of its
    relevant image (0 if it was not verified) and a distractor's negative
    score is its best final score.  Without verification the vote scores
    play the same roles.
    """
    rankings, gts, pos, neg = [], [], [], []
    top1_hits = accepted_true = accepted_neg = 0
    timings = []
    for q, rel in zip(queries, relevant):
        res = run_query(q, state, scoring, gv)
        timings.append(res.timing)
        if gv is not None:
            best = _best_report(res.reports)
            scores = {r.image_id: r.final_score for r in res.reports}
        if rel is None:
            if gv is not None:
                neg.append(max(scores.values(), default=0))
                accepted_neg += best is not None
            else:
                neg.append(float(res.scores.max()) if len(res.scores) else 0.0)
            continue
        rankings.append(res.ranking)
        gts.append(rel)
        if gv is not None:
            pos.append(scores.get(rel, 0))
            accepted_true += best is not None
            top1_hits += best is not None and best.image_id == rel
        else:
            pos.append(float(res.scores[rel]))
            top1_hits += len(res.ranking) > 0 and res.ranking[0] == rel
    n_true = len(gts)
    timing = {k: float(np.median([t.as_dict()[k] for t in timings])) for k in ("quantize", "hamming", "gv", "total")} \
        if timings else {}
    roc = roc_curve(pos, neg) if pos and neg else []
    zfp = zero_fp_accuracy(pos, neg) if pos and neg else float("nan")
    return BenchmarkReport(
        scheme=scoring.scheme.value, gv_mode=gv_mode,
        map=mean_average_precision(rankings, gts) if rankings else float("nan"),
        top1_recall=top1_hits / n_true if n_true else float("nan"),
        accepted_true=accepted_true, accepted_distractors=accepted_neg,
        zero_fp_accuracy=zfp, roc=roc, positive_scores=np.asarray(pos), negative_scores=np.asarray(neg),
        timing=timing, n_queries=n_true, n_distractors=len(neg),
    )

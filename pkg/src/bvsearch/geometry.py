"""Homography verification of ranked candidates.

Correspondences map reference positions (source) to query positions
(destination).  Hypotheses come from progressive sampling over the
quality-sorted correspondence list; the winning model must additionally
project the reference rectangle onto a convex, consistently oriented
quadrilateral.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .core import UsageError
from .index import EngineState
from .scoring import FeatureMatch, VoteTable

SAMPLE_SIZE = 4


class DegenerateSampleError(ValueError):
    """Raised when correspondences cannot determine a homography."""


@dataclass(frozen=True, eq=False)
class Homography:
    h: np.ndarray

    def __post_init__(self):
        h = np.array(self.h, dtype=np.float64).reshape(3, 3)
        if abs(h[2, 2]) > 1e-12:
            h = h / h[2, 2]
        object.__setattr__(self, "h", h)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return project(self.h, pts)

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.h))


@dataclass(frozen=True)
class GVConfig:
    top_r: int = 3
    max_iterations: int = 2000
    inlier_px: float = 5.0
    min_inliers: int = 12
    dedup_px: float = 5.0
    convexity_check: bool = True
    seed: int = 0
    confidence: float = 0.99

    def __post_init__(self):
        if self.top_r < 1:
            raise UsageError(f"top_r must be >= 1, got {self.top_r}")
        if self.max_iterations < 1:
            raise UsageError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not self.inlier_px > 0:
            raise UsageError(f"inlier_px must be positive, got {self.inlier_px}")
        if not self.dedup_px > 0:
            raise UsageError(f"dedup_px must be positive, got {self.dedup_px}")
        if not 0 < self.confidence < 1:
            raise UsageError(f"confidence must lie in (0, 1), got {self.confidence}")


@dataclass
class GVReport:
    image_id: int
    homography: Homography | None
    inlier_matches: list[FeatureMatch] = field(default_factory=list, repr=False)
    raw_inliers: int = 0
    deduped_inliers: int = 0
    convex: bool = False
    final_score: int = 0
    accepted: bool = False


def project(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    q = pts @ h[:2, :2].T + h[:2, 2]
    w = pts @ h[2, :2] + h[2, 2]
    return q / w[..., None]


def _normalizing_transform(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2); batched over leading axes."""
    c = pts.mean(axis=-2)
    d = np.sqrt(((pts - c[..., None, :]) ** 2).sum(-1)).mean(-1)
    s = np.sqrt(2.0) / np.where(d > 0, d, 1.0)
    T = np.zeros(pts.shape[:-2] + (3, 3))
    T[..., 0, 0] = s
    T[..., 1, 1] = s
    T[..., 0, 2] = -s * c[..., 0]
    T[..., 1, 2] = -s * c[..., 1]
    T[..., 2, 2] = 1.0
    return T


def _apply_similarity(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts * T[..., None, 0, 0:1] + T[..., None, :2, 2]


def _dlt_rows(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    r1 = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=-1)
    r2 = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], axis=-1)
    return np.concatenate([r1, r2], axis=-2)


def _min_triangle_area(pts: np.ndarray) -> np.ndarray:
    """Smallest |area| over the four triangles of 4-point sets (..., 4, 2)."""
    areas = []
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = pts[..., i, :], pts[..., j, :], pts[..., k, :]
        areas.append(np.abs((b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1])
                            - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])) / 2)
    return np.min(areas, axis=0)


COLLINEAR_TOL = 1e-6


def estimate_homography_dlt(src, dst) -> Homography:
    """Least-squares homography from >= 4 correspondences by normalized DLT."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise UsageError(f"{len(src)} source points but {len(dst)} destination points")
    if len(src) < SAMPLE_SIZE:
        raise DegenerateSampleError(f"need at least {SAMPLE_SIZE} correspondences, got {len(src)}")
    T1, T2 = _normalizing_transform(src), _normalizing_transform(dst)
    ns, nd = _apply_similarity(T1, src), _apply_similarity(T2, dst)
    if len(src) == SAMPLE_SIZE and (_min_triangle_area(ns) < COLLINEAR_TOL or _min_triangle_area(nd) < COLLINEAR_TOL):
        raise DegenerateSampleError("three of the four points are collinear or coincident")
    A = _dlt_rows(ns, nd)
    _, s, vt = np.linalg.svd(A)
    # rank must be 8: the second-smallest singular value of the 9 may not vanish
    if s[7] < 1e-10 * s[0]:
        raise DegenerateSampleError("correspondences do not determine a unique homography")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(T2) @ hn @ T1
    if not np.all(np.isfinite(h)) or abs(h[2, 2]) < 1e-12 * np.abs(h).max():
        raise DegenerateSampleError("estimated homography is not normalizable")
    return Homography(h / h[2, 2])


def _minimal_solve_batch(src: np.ndarray, dst: np.ndarray):
    """Homographies from (B, 4, 2) samples; returns (B, 3, 3) and a validity mask."""
    T1, T2 = _normalizing_transform(src), _normalizing_transform(dst)
    ns, nd = _apply_similarity(T1, src), _apply_similarity(T2, dst)
    ok = (_min_triangle_area(ns) > COLLINEAR_TOL) & (_min_triangle_area(nd) > COLLINEAR_TOL)
    A = _dlt_rows(ns, nd)
    M, b = A[..., :8], -A[..., 8]
    ok &= np.abs(np.linalg.det(M)) > 1e-10
    M[~ok] = np.eye(8)
    b[~ok] = 0.0
    hv = np.linalg.solve(M, b[..., None])[..., 0]
    hn = np.concatenate([hv, np.ones(hv.shape[:-1] + (1,))], axis=-1).reshape(-1, 3, 3)
    T2inv = np.zeros_like(T2)
    s = T2[:, 0, 0]
    T2inv[:, 0, 0] = T2inv[:, 1, 1] = 1 / s
    T2inv[:, :2, 2] = -T2[:, :2, 2] / s[:, None]
    T2inv[:, 2, 2] = 1
    H = T2inv @ hn @ T1
    H22 = H[:, 2, 2]
    ok &= np.abs(H22) > 1e-12
    H[ok] /= H22[ok, None, None]
    ok &= np.isfinite(H).all(axis=(1, 2))
    ok &= np.abs(np.linalg.det(np.where(ok[:, None, None], H, np.eye(3)))) > 1e-12
    return H, ok


def _transfer_inliers(H: np.ndarray, src: np.ndarray, dst: np.ndarray, px: float) -> np.ndarray:
    """(B, n) mask: forward and backward reprojection errors both below px."""
    Hinv = np.linalg.inv(H)
    thr = px * px

    def err(M, a, b):
        ah = np.concatenate([a, np.ones((len(a), 1))], axis=1)
        q = np.matmul(ah, M.transpose(0, 2, 1))
        w = q[..., 2]
        safe = np.abs(w) > 1e-12
        w = np.where(safe, w, 1.0)
        e = (q[..., 0] / w - b[:, 0]) ** 2 + (q[..., 1] / w - b[:, 1]) ** 2
        return np.where(safe, e, np.inf)

    return (err(H, src, dst) < thr) & (err(Hinv, dst, src) < thr)


@lru_cache(maxsize=256)
def prosac_schedule(n: int, max_iterations: int) -> tuple[np.ndarray, np.ndarray]:
    """Pool size and forced-last flag for each iteration of progressive sampling.

    While ``forced`` is set, the sample is the newest correspondence of the
    pool plus three drawn from the rest of the pool; afterwards four are
    drawn uniformly from the pool.
    """
    m = SAMPLE_SIZE
    pool = np.empty(max_iterations, np.int64)
    forced = np.empty(max_iterations, bool)
    t_n = float(max_iterations)
    for i in range(m):
        t_n *= (m - i) / (n - i)
    size, t_prime = m, 1
    for t in range(1, max_iterations + 1):
        if t > t_prime and size < n:
            t_next = t_n * (size + 1) / (size + 1 - m)
            t_prime += max(1, math.ceil(t_next - t_n))
            t_n = t_next
            size += 1
        pool[t - 1] = size
        forced[t - 1] = t <= t_prime and size > m
    return pool, forced


def _draw_samples(rng: np.random.Generator, pool: np.ndarray, forced: np.ndarray) -> np.ndarray:
    B = len(pool)
    limit = np.where(forced, pool - 1, pool)
    idx = np.floor(rng.random((B, SAMPLE_SIZE)) * limit[:, None]).astype(np.int64)
    idx[forced, 3] = pool[forced] - 1
    while True:
        s = np.sort(idx, axis=1)
        dup = (s[:, 1:] == s[:, :-1]).any(axis=1)
        if not dup.any():
            return idx
        redraw = np.floor(rng.random((int(dup.sum()), SAMPLE_SIZE)) * limit[dup, None]).astype(np.int64)
        redraw[forced[dup], 3] = pool[dup & forced] - 1
        idx[dup] = redraw


def required_iterations(inlier_ratio: float, confidence: float) -> float:
    if inlier_ratio >= 1.0:
        return 1.0
    if inlier_ratio <= 0.0:
        return math.inf
    p = inlier_ratio ** SAMPLE_SIZE
    return math.log(1 - confidence) / math.log1p(-p) if p < 1 else 1.0


def prosac_arrays(src: np.ndarray, dst: np.ndarray, cfg: GVConfig = GVConfig(),
                  rng: np.random.Generator | None = None, batch: int = 64, max_batch: int = 1024):
    """Progressive sampling consensus over correspondences already sorted best first.

    Returns ``(H, inlier_mask)`` or ``None``.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < SAMPLE_SIZE:
        return None
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    pool, forced = prosac_schedule(n, cfg.max_iterations)
    best_count, best_H, best_mask = 0, None, None
    t = 0
    while t < cfg.max_iterations:
        stop = min(t + batch, cfg.max_iterations)
        batch = min(2 * batch, max_batch)
        samples = _draw_samples(rng, pool[t:stop], forced[t:stop])
        H, ok = _minimal_solve_batch(src[samples], dst[samples])
        t = stop
        if ok.any():
            Hs = H[ok]
            masks = _transfer_inliers(Hs, src, dst, cfg.inlier_px)
            counts = masks.sum(axis=1)
            i = int(np.argmax(counts))
            if counts[i] > best_count:
                best_count, best_H, best_mask = int(counts[i]), Hs[i], masks[i]
        if best_count == n or t >= required_iterations(best_count / n, cfg.confidence):
            break
    if best_count < SAMPLE_SIZE:
        return None
    return Homography(best_H), best_mask


def _match_arrays(matches: Sequence[FeatureMatch]):
    src = np.array([[m.entry.x, m.entry.y] for m in matches], dtype=np.float64).reshape(-1, 2)
    dst = np.array([[m.query_x, m.query_y] for m in matches], dtype=np.float64).reshape(-1, 2)
    return src, dst


def quality_order(distance: np.ndarray) -> np.ndarray:
    return np.argsort(np.asarray(distance), kind="stable")


def prosac_homography(matches: Sequence[FeatureMatch], cfg: GVConfig = GVConfig()):
    """Fit a homography to matches ranked by ascending substring distance.

    Returns ``(Homography, inlier matches)`` or ``None``.
    """
    if len(matches) < SAMPLE_SIZE:
        return None
    order = quality_order([m.distance for m in matches])
    ranked = [matches[i] for i in order]
    src, dst = _match_arrays(ranked)
    result = prosac_arrays(src, dst, cfg)
    if result is None:
        return None
    H, mask = result
    return H, [m for m, keep in zip(ranked, mask) if keep]


def _cross_up(u: np.ndarray, v: np.ndarray) -> float:
    # image y points down; negate to measure turns with y pointing up
    return -(u[0] * v[1] - u[1] * v[0])


def convexity_check(h: Homography | np.ndarray, ref_width: float, ref_height: float) -> bool:
    """True iff the projected reference rectangle is convex and keeps its orientation."""
    H = h.h if isinstance(h, Homography) else np.asarray(h, dtype=np.float64)
    corners = np.array([[0, 0], [ref_width, 0], [ref_width, ref_height], [0, ref_height]], dtype=np.float64)
    w = corners @ H[2, :2] + H[2, 2]
    if np.any(np.abs(w) < 1e-12) or not np.all(np.isfinite(H)):
        return False
    a, b, c, d = (corners @ H[:2, :2].T + H[:2, 2]) / w[:, None]
    turns = (
        _cross_up(d - a, b - a),
        _cross_up(a - b, c - b),
        _cross_up(b - c, d - c),
        _cross_up(c - d, a - d),
    )
    return all(t > 0 for t in turns)


def dedup_mask(query_xy: np.ndarray, ref_xy: np.ndarray, dedup_px: float) -> np.ndarray:
    """Greedy scan: drop a point when a kept one is within dedup_px in both images."""
    query_xy = np.asarray(query_xy, dtype=np.float64).reshape(-1, 2)
    ref_xy = np.asarray(ref_xy, dtype=np.float64).reshape(-1, 2)
    keep = np.zeros(len(query_xy), bool)
    thr = dedup_px * dedup_px
    kept_q = np.empty((len(query_xy), 2))
    kept_r = np.empty((len(query_xy), 2))
    n_kept = 0
    for i in range(len(query_xy)):
        if n_kept:
            dq = ((kept_q[:n_kept] - query_xy[i]) ** 2).sum(1)
            dr = ((kept_r[:n_kept] - ref_xy[i]) ** 2).sum(1)
            if np.any((dq < thr) & (dr < thr)):
                continue
        keep[i] = True
        kept_q[n_kept] = query_xy[i]
        kept_r[n_kept] = ref_xy[i]
        n_kept += 1
    return keep


def dedup_inliers(inliers: Sequence[FeatureMatch], dedup_px: float = 5.0) -> list[FeatureMatch]:
    src, dst = _match_arrays(inliers)
    keep = dedup_mask(dst, src, dedup_px)
    return [m for m, k in zip(inliers, keep) if k]


def verify_candidate(image_id: int, votes: VoteTable, extent: Sequence[float], cfg: GVConfig) -> GVReport:
    rows = votes.rows_for(image_id)
    rows = rows[np.lexsort((votes.posting_pos[rows], votes.distance[rows]))]
    rng = np.random.default_rng([cfg.seed, image_id])
    result = prosac_arrays(votes.ref_xy[rows], votes.query_xy[rows], cfg, rng)
    if result is None:
        return GVReport(image_id, None)
    H, mask = result
    inl = rows[mask]
    convex = convexity_check(H, extent[0], extent[1])
    keep = dedup_mask(votes.query_xy[inl], votes.ref_xy[inl], cfg.dedup_px)
    deduped = inl[keep]
    report = GVReport(image_id, H, votes.feature_matches(deduped), raw_inliers=int(mask.sum()),
                      deduped_inliers=int(keep.sum()), convex=convex)
    if convex or not cfg.convexity_check:
        report.final_score = report.deduped_inliers
    report.accepted = report.final_score >= cfg.min_inliers
    return report


def verify(ranking: Sequence[int], vote_table: VoteTable, state: EngineState,
           cfg: GVConfig = GVConfig()) -> list[GVReport]:
    """Geometric verification of the top-R candidates, best final score first."""
    extents = state.index.image_extents()
    reports = [verify_candidate(int(i), vote_table, extents[int(i)], cfg) for i in list(ranking)[:cfg.top_r]]
    order = sorted(range(len(reports)), key=lambda j: -reports[j].final_score)
    return [reports[j] for j in order]

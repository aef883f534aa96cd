"""Per-word substring dictionaries: pick informative, weakly correlated bits."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    BinaryDescriptor,
    ConfigurationError,
    Substring,
    UsageError,
    check_descriptors,
    pack_bits,
    unpack_bits,
)
from .vocabulary import Vocabulary

DEFAULT_T_BITS = 64
DEFAULT_TH_INIT = 0.25
DEFAULT_TH_STEP = 0.05


@dataclass(eq=False)
class SubstringDictionary:
    """``positions[w]`` lists the T bit ids read out for word ``w``, in admission order.

    ``thresholds`` records the correlation threshold each row was accepted
    at; it and the schedule are build metadata and do not take part in
    equality (they are not serialized).
    """

    positions: np.ndarray
    n_bits: int
    th_init: float = DEFAULT_TH_INIT
    th_step: float = DEFAULT_TH_STEP
    thresholds: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.int64)
        if self.positions.ndim != 2:
            raise UsageError("positions must be a 2-D (n_words, t_bits) array")
        t = self.positions.shape[1]
        if t < 8 or t % 8 or t > self.n_bits:
            raise ConfigurationError(f"t_bits must be a multiple of 8 in [8, {self.n_bits}], got {t}")
        if self.positions.size and (self.positions.min() < 0 or self.positions.max() >= self.n_bits):
            raise UsageError(f"bit positions must lie in [0, {self.n_bits})")
        sorted_rows = np.sort(self.positions, axis=1)
        if np.any(sorted_rows[:, 1:] == sorted_rows[:, :-1]):
            raise UsageError("dictionary rows must not repeat a position")
        self.positions.setflags(write=False)

    @property
    def t_bits(self) -> int:
        return self.positions.shape[1]

    @property
    def n_words(self) -> int:
        return self.positions.shape[0]

    def __eq__(self, other):
        if not isinstance(other, SubstringDictionary):
            return NotImplemented
        return self.n_bits == other.n_bits and np.array_equal(self.positions, other.positions)

    def extract_batch(self, X: np.ndarray, words: np.ndarray) -> np.ndarray:
        """Packed substrings (n, t_bits // 8) for packed descriptors X under ``words``."""
        X = check_descriptors(X, self.n_bits)
        words = np.asarray(words, dtype=np.int64)
        if words.size and (words.min() < 0 or words.max() >= self.n_words):
            raise UsageError(f"word id out of range [0, {self.n_words})")
        bits = unpack_bits(X, self.n_bits)
        picked = np.take_along_axis(bits, self.positions[words], axis=1)
        return pack_bits(picked)


def extract(d: BinaryDescriptor, w: int, dictionary: SubstringDictionary) -> Substring:
    if not 0 <= w < dictionary.n_words:
        raise UsageError(f"word id {w} out of range [0, {dictionary.n_words})")
    if d.n_bits != dictionary.n_bits:
        raise UsageError(f"descriptor width {d.n_bits} does not match dictionary width {dictionary.n_bits}")
    packed = dictionary.extract_batch(d.to_array().reshape(1, -1), np.array([w]))
    return Substring(packed[0].tobytes(), dictionary.t_bits)


def _statistics(bits: np.ndarray):
    """Means and Pearson correlations of a (n, D) 0/1 matrix; n may be 1.

    Constant bits get zero correlation with everything else.  The diagonal is 1.
    """
    x = bits.astype(np.float64)
    means = x.mean(axis=0)
    centered = x - means
    cov = centered.T @ centered
    std = np.sqrt(np.diag(cov))
    live = std > 0
    corr = np.zeros_like(cov)
    corr[np.ix_(live, live)] = cov[np.ix_(live, live)] / np.outer(std[live], std[live])
    np.clip(corr, -1.0, 1.0, out=corr)
    np.fill_diagonal(corr, 1.0)
    return means, corr


def bit_statistics(descs) -> tuple[np.ndarray, np.ndarray]:
    """Per-bit means and the D x D bit correlation matrix."""
    n_bits = descs[0].n_bits if len(descs) and isinstance(descs[0], BinaryDescriptor) else None
    X = check_descriptors(descs, n_bits)
    if len(X) < 2:
        raise UsageError(f"bit statistics need at least 2 descriptors, got {len(X)}")
    return _statistics(unpack_bits(X))


def entropy_order(means: np.ndarray) -> np.ndarray:
    """Bit ids sorted by |mean - 0.5|, lower id first on ties."""
    return np.lexsort((np.arange(len(means)), np.abs(means - 0.5)))


def _greedy_select(order: np.ndarray, corr: np.ndarray, t_bits: int, th: float) -> list[int]:
    absc = np.abs(corr)
    selected = [int(order[0])]
    # running max |C| against the selected set, for every candidate bit
    worst = absc[order[0]].copy()
    for j in order[1:]:
        if len(selected) == t_bits:
            break
        if worst[j] < th:
            selected.append(int(j))
            np.maximum(worst, absc[j], out=worst)
    return selected


def select_bits(bits: np.ndarray, t_bits: int, th_init: float = DEFAULT_TH_INIT,
                th_step: float = DEFAULT_TH_STEP) -> tuple[list[int], float]:
    """Choose ``t_bits`` positions for one word from its (n, D) unpacked training bits.

    Bits are visited from most to least balanced and admitted while their
    |correlation| with every admitted bit stays below ``th``.  If fewer than
    ``t_bits`` survive, ``th`` is raised by ``th_step`` and the pass repeats.
    Returns the row and the threshold it was accepted at.
    """
    n_bits = bits.shape[1]
    if t_bits > n_bits:
        raise ConfigurationError(f"t_bits={t_bits} exceeds descriptor width {n_bits}")
    means, corr = _statistics(bits)
    order = entropy_order(means)
    step = 0
    while True:
        th = th_init + step * th_step
        row = _greedy_select(order, corr, t_bits, th)
        if len(row) == t_bits:
            return row, th
        if th > 1.0:
            raise ConfigurationError(f"only {len(row)} of {t_bits} bits selectable even at th={th:g}")
        step += 1


def build_dictionary(training, v: Vocabulary, t_bits: int = DEFAULT_T_BITS,
                     th_init: float = DEFAULT_TH_INIT, th_step: float = DEFAULT_TH_STEP,
                     words: np.ndarray | None = None) -> SubstringDictionary:
    """Run the per-word bit selection over training descriptors grouped by nearest word.

    Words with no training vectors get the row ``0 .. t_bits - 1``.
    ``words`` may pass precomputed assignments to skip quantization.
    """
    X = check_descriptors(training, v.n_bits)
    if len(X) == 0:
        raise ConfigurationError("substring dictionary needs a non-empty training set")
    if not 0 < th_init <= 1:
        raise ConfigurationError(f"th_init must lie in (0, 1], got {th_init}")
    if th_step <= 0:
        raise ConfigurationError(f"th_step must be positive, got {th_step}")
    if t_bits < 8 or t_bits % 8 or t_bits > v.n_bits:
        raise ConfigurationError(f"t_bits must be a multiple of 8 in [8, {v.n_bits}], got {t_bits}")
    if words is None:
        words = v.quantize_batch(X)
    bits = unpack_bits(X, v.n_bits)
    order = np.argsort(words, kind="stable")
    bounds = np.searchsorted(words[order], np.arange(v.n_words + 1))

    positions = np.empty((v.n_words, t_bits), dtype=np.int64)
    thresholds = np.full(v.n_words, np.nan)
    for w in range(v.n_words):
        members = order[bounds[w]:bounds[w + 1]]
        if len(members) == 0:
            positions[w] = np.arange(t_bits)
            continue
        row, th = select_bits(bits[members], t_bits, th_init, th_step)
        positions[w] = row
        thresholds[w] = th
    return SubstringDictionary(positions, v.n_bits, th_init, th_step, thresholds)

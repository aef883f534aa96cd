"""Inverted index of compact posting entries and the on-disk formats.

Each posting entry is ``image_id u16, x u16, y u16, substring T/8 bytes``.
All multi-byte integers are little-endian.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from .core import (
    CapacityError,
    Feature,
    FeatureSet,
    FormatError,
    Substring,
    UsageError,
    check_n_bits,
)
from .substring import SubstringDictionary
from .vocabulary import Vocabulary

MAX_IMAGES = 65535
COORD_MAX = 65535

DESCRIPTOR_MAGIC = b"BFDS"
INDEX_MAGIC = b"BFIX"
FORMAT_VERSION = 1

_DESC_HEADER = struct.Struct("<4sBHI")
_INDEX_HEADER = struct.Struct("<4sBHIHI")


def entry_dtype(t_bits: int) -> np.dtype:
    return np.dtype([("image_id", "<u2"), ("x", "<u2"), ("y", "<u2"), ("substring", "u1", (t_bits // 8,))])


def entry_size(t_bits: int) -> int:
    return 6 + t_bits // 8


@dataclass(frozen=True)
class IndexEntry:
    image_id: int
    x: int
    y: int
    substring: Substring


def round_positions(xy: np.ndarray) -> np.ndarray:
    """Round to the nearest pixel (half away from zero) and clamp to u16."""
    xy = np.asarray(xy, dtype=np.float64)
    r = np.floor(xy + 0.5)
    return np.clip(r, 0, COORD_MAX).astype(np.uint16)


@dataclass(frozen=True)
class Postings:
    """One word's posting list in columnar form."""

    image_ids: np.ndarray
    xy: np.ndarray
    substrings: np.ndarray
    t_bits: int

    def __len__(self) -> int:
        return len(self.image_ids)

    def entry(self, i: int) -> IndexEntry:
        return IndexEntry(int(self.image_ids[i]), int(self.xy[i, 0]), int(self.xy[i, 1]),
                          Substring(self.substrings[i].tobytes(), self.t_bits))

    def entries(self) -> list[IndexEntry]:
        return [self.entry(i) for i in range(len(self))]

    @classmethod
    def from_entries(cls, entries: Sequence[IndexEntry], t_bits: int) -> "Postings":
        if any(e.substring.n_bits != t_bits for e in entries):
            raise UsageError(f"posting entries must all carry {t_bits}-bit substrings")
        ids = np.array([e.image_id for e in entries], dtype=np.uint16)
        xy = np.array([[e.x, e.y] for e in entries], dtype=np.uint16).reshape(-1, 2)
        subs = np.frombuffer(b"".join(e.substring.data for e in entries), dtype=np.uint8).reshape(-1, t_bits // 8)
        return cls(ids, xy, subs, t_bits)


class InvertedIndex:
    """N posting lists plus the per-word and per-image counts.

    Entries are appended image by image.  The first read after an append
    compacts everything into CSR form (``offsets`` into flat, word-sorted
    arrays); within a word, entries keep insertion order.
    """

    def __init__(self, n_words: int, t_bits: int):
        self.n_words = n_words
        self.t_bits = t_bits
        self.features_per_image: list[int] = []
        self._pending: list[tuple] = []
        self._words = np.zeros(0, np.int64)
        self._image_ids = np.zeros(0, np.uint16)
        self._xy = np.zeros((0, 2), np.uint16)
        self._subs = np.zeros((0, t_bits // 8), np.uint8)
        self._offsets = np.zeros(n_words + 1, np.int64)
        self._doc_freq = np.zeros(n_words, np.int64)

    @property
    def n_images(self) -> int:
        return len(self.features_per_image)

    @property
    def n_entries(self) -> int:
        self._compact()
        return len(self._image_ids)

    def append(self, image_id: int, words: np.ndarray, xy: np.ndarray, substrings: np.ndarray) -> None:
        if image_id != self.n_images:
            raise UsageError(f"image ids must be dense and in order: expected {self.n_images}, got {image_id}")
        if self.n_images >= MAX_IMAGES:
            raise CapacityError(f"the index holds at most {MAX_IMAGES} images")
        words = np.asarray(words, dtype=np.int64)
        self.features_per_image.append(len(words))
        if len(words):
            self._pending.append((words, np.full(len(words), image_id, np.uint16),
                                  round_positions(xy), np.asarray(substrings, np.uint8)))

    def _compact(self) -> None:
        if not self._pending:
            return
        words = np.concatenate([self._words] + [p[0] for p in self._pending])
        ids = np.concatenate([self._image_ids] + [p[1] for p in self._pending])
        xy = np.concatenate([self._xy] + [p[2] for p in self._pending])
        subs = np.concatenate([self._subs] + [p[3] for p in self._pending])
        self._pending = []
        order = np.argsort(words, kind="stable")
        self._words, self._image_ids, self._xy, self._subs = words[order], ids[order], xy[order], subs[order]
        self._offsets = np.searchsorted(self._words, np.arange(self.n_words + 1))
        self._recount()

    def _recount(self) -> None:
        self._doc_freq = np.zeros(self.n_words, np.int64)
        if len(self._words):
            # distinct (word, image) pairs
            key = self._words * (MAX_IMAGES + 1) + self._image_ids.astype(np.int64)
            uniq = np.unique(key) // (MAX_IMAGES + 1)
            self._doc_freq = np.bincount(uniq, minlength=self.n_words)

    @property
    def offsets(self) -> np.ndarray:
        self._compact()
        return self._offsets

    @property
    def image_ids(self) -> np.ndarray:
        self._compact()
        return self._image_ids

    @property
    def xy(self) -> np.ndarray:
        self._compact()
        return self._xy

    @property
    def substrings(self) -> np.ndarray:
        self._compact()
        return self._subs

    @property
    def doc_freq(self) -> np.ndarray:
        self._compact()
        return self._doc_freq

    def postings(self, w: int) -> Postings:
        self._compact()
        lo, hi = self._offsets[w], self._offsets[w + 1]
        return Postings(self._image_ids[lo:hi], self._xy[lo:hi], self._subs[lo:hi], self.t_bits)

    def posting_lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def image_extents(self) -> np.ndarray:
        """(n_images, 2) width/height per image: max rounded coordinate + 1."""
        ext = np.zeros((self.n_images, 2), np.int64)
        if self.n_entries:
            ids = self.image_ids.astype(np.int64)
            np.maximum.at(ext, ids, self.xy.astype(np.int64) + 1)
        return ext

    def payload_bytes(self) -> int:
        """Bytes taken by posting entries alone."""
        return self.n_entries * entry_size(self.t_bits)

    def __eq__(self, other):
        if not isinstance(other, InvertedIndex):
            return NotImplemented
        return (self.n_words == other.n_words and self.t_bits == other.t_bits
                and self.features_per_image == other.features_per_image
                and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.image_ids, other.image_ids)
                and np.array_equal(self.xy, other.xy)
                and np.array_equal(self.substrings, other.substrings)
                and np.array_equal(self.doc_freq, other.doc_freq))


@dataclass(eq=True)
class EngineState:
    vocabulary: Vocabulary
    dictionary: SubstringDictionary
    index: InvertedIndex = field(default=None)

    def __post_init__(self):
        if self.vocabulary.n_bits != self.dictionary.n_bits:
            raise UsageError("vocabulary and dictionary disagree on descriptor width")
        if self.vocabulary.n_words != self.dictionary.n_words:
            raise UsageError("vocabulary and dictionary disagree on the number of words")
        if self.index is None:
            self.index = InvertedIndex(self.n_words, self.t_bits)
        if self.index.n_words != self.n_words or self.index.t_bits != self.t_bits:
            raise UsageError("index shape does not match vocabulary/dictionary")

    @property
    def n_bits(self) -> int:
        return self.vocabulary.n_bits

    @property
    def n_words(self) -> int:
        return self.vocabulary.n_words

    @property
    def t_bits(self) -> int:
        return self.dictionary.t_bits

    def encode(self, features: FeatureSet) -> tuple[np.ndarray, np.ndarray]:
        """Word ids and packed substrings for a feature set."""
        if features.n_bits != self.n_bits:
            raise UsageError(f"descriptor width {features.n_bits} does not match engine width {self.n_bits}")
        words = self.vocabulary.quantize_batch(features.descriptors)
        return words, self.dictionary.extract_batch(features.descriptors, words)


def add_image(image_id: int, features: FeatureSet | Sequence[Feature], state: EngineState) -> EngineState:
    """Quantize, project and append one reference image's features."""
    if not isinstance(features, FeatureSet):
        features = FeatureSet.from_features(list(features), state.n_bits)
    if image_id != state.index.n_images:
        raise UsageError(f"image ids must be dense and in order: expected {state.index.n_images}, got {image_id}")
    if state.index.n_images >= MAX_IMAGES:
        raise CapacityError(f"the index holds at most {MAX_IMAGES} images")
    words, subs = state.encode(features)
    state.index.append(image_id, words, features.xy, subs)
    return state


# -- engine file -----------------------------------------------------------

def save(state: EngineState, sink: BinaryIO | str | os.PathLike) -> int:
    """Write the engine; returns the number of bytes written."""
    if not hasattr(sink, "write"):
        with open(sink, "wb") as fh:
            return save(state, fh)
    idx = state.index
    n_words, t_bits = state.n_words, state.t_bits
    written = sink.write(_INDEX_HEADER.pack(INDEX_MAGIC, FORMAT_VERSION, state.n_bits, n_words, t_bits, idx.n_images))
    written += sink.write(state.vocabulary.centroids.tobytes())
    written += sink.write(state.dictionary.positions.astype(np.uint8).tobytes())
    entries = np.empty(idx.n_entries, dtype=entry_dtype(t_bits))
    entries["image_id"] = idx.image_ids
    entries["x"] = idx.xy[:, 0]
    entries["y"] = idx.xy[:, 1]
    entries["substring"] = idx.substrings
    offsets = idx.offsets
    for w in range(n_words):
        lo, hi = int(offsets[w]), int(offsets[w + 1])
        written += sink.write(struct.pack("<Q", hi - lo))
        written += sink.write(entries[lo:hi].tobytes())
    written += sink.write(idx.doc_freq.astype("<u4").tobytes())
    written += sink.write(np.asarray(idx.features_per_image, dtype="<u4").tobytes())
    return written


def to_bytes(state: EngineState) -> bytes:
    buf = io.BytesIO()
    save(state, buf)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} left", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def load(source: BinaryIO | bytes | str | os.PathLike) -> EngineState:
    if isinstance(source, (bytes, bytearray, memoryview)):
        data = bytes(source)
    elif hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    r = _Reader(data)
    magic, version, n_bits, n_words, t_bits, n_images = _INDEX_HEADER.unpack(r.take(_INDEX_HEADER.size, "header"))
    if magic != INDEX_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {INDEX_MAGIC!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    try:
        check_n_bits(n_bits)
    except UsageError as exc:
        raise FormatError(str(exc), 5) from None
    if n_words < 2 or t_bits < 8 or t_bits % 8 or t_bits > n_bits:
        raise FormatError(f"inconsistent header counts: N={n_words}, T={t_bits}, D={n_bits}", 7)

    n_bytes = n_bits // 8
    vocab = np.frombuffer(r.take(n_words * n_bytes, "vocabulary"), np.uint8).reshape(n_words, n_bytes)
    dict_pos = r.pos
    positions = np.frombuffer(r.take(n_words * t_bits, "dictionary"), np.uint8).reshape(n_words, t_bits)
    try:
        dictionary = SubstringDictionary(positions.astype(np.int64), n_bits)
    except (UsageError, ValueError) as exc:
        raise FormatError(f"invalid dictionary: {exc}", dict_pos) from None

    dt = entry_dtype(t_bits)
    chunks, words = [], []
    for w in range(n_words):
        (count,) = struct.unpack("<Q", r.take(8, f"entry count of word {w}"))
        start = r.pos
        if count > (len(data) - start) // dt.itemsize:
            raise FormatError(f"word {w} claims {count} entries, more than the file holds", start - 8)
        block = np.frombuffer(r.take(count * dt.itemsize, f"entries of word {w}"), dtype=dt)
        if count and int(block["image_id"].max()) >= n_images:
            raise FormatError(f"word {w} references image {int(block['image_id'].max())} >= n_images={n_images}", start)
        chunks.append(block)
        words.append(np.full(count, w, np.int64))
    df_pos = r.pos
    doc_freq = np.frombuffer(r.take(n_words * 4, "doc_freq"), "<u4").astype(np.int64)
    fpi_pos = r.pos
    fpi = np.frombuffer(r.take(n_images * 4, "features_per_image"), "<u4").astype(np.int64)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes", r.pos)

    index = InvertedIndex(n_words, t_bits)
    entries = np.concatenate(chunks) if chunks else np.zeros(0, dt)
    index.features_per_image = [int(c) for c in fpi]
    index._words = np.concatenate(words) if words else np.zeros(0, np.int64)
    index._image_ids = entries["image_id"].astype(np.uint16)
    index._xy = np.stack([entries["x"], entries["y"]], axis=1).astype(np.uint16).reshape(-1, 2)
    index._subs = np.ascontiguousarray(entries["substring"], dtype=np.uint8).reshape(-1, t_bits // 8)
    index._offsets = np.searchsorted(index._words, np.arange(n_words + 1))
    index._recount()
    if not np.array_equal(index._doc_freq, doc_freq):
        raise FormatError("doc_freq block disagrees with posting lists", df_pos)
    if int(fpi.sum()) != len(entries):
        raise FormatError(f"features_per_image sums to {int(fpi.sum())} but {len(entries)} entries stored", fpi_pos)
    return EngineState(Vocabulary(vocab.copy(), n_bits), dictionary, index)


def layout_sizes(n_bits: int, n_words: int, t_bits: int, n_images: int, n_entries: int) -> dict[str, int]:
    """Byte size of every block of an engine file."""
    sizes = {
        "header": _INDEX_HEADER.size,
        "vocabulary": n_words * n_bits // 8,
        "dictionary": n_words * t_bits,
        "entry_counts": 8 * n_words,
        "postings": n_entries * entry_size(t_bits),
        "doc_freq": 4 * n_words,
        "features_per_image": 4 * n_images,
    }
    sizes["total"] = sum(sizes.values())
    return sizes


# -- descriptor files ------------------------------------------------------

def write_descriptor_file(sink: BinaryIO | str | os.PathLike, features: FeatureSet | Sequence[Feature],
                          n_bits: int | None = None) -> int:
    if not isinstance(features, FeatureSet):
        features = FeatureSet.from_features(list(features), n_bits)
    if not hasattr(sink, "write"):
        with open(sink, "wb") as fh:
            return write_descriptor_file(fh, features)
    n = len(features)
    rec = np.dtype([("kp", "<f4", (4,)), ("desc", "u1", (features.n_bits // 8,))])
    records = np.empty(n, rec)
    records["kp"] = features.keypoints
    records["desc"] = features.descriptors
    written = sink.write(_DESC_HEADER.pack(DESCRIPTOR_MAGIC, FORMAT_VERSION, features.n_bits, n))
    written += sink.write(records.tobytes())
    return written


def read_descriptor_file(source: BinaryIO | bytes | str | os.PathLike,
                         n_bits: int | None = None) -> tuple[FeatureSet, dict]:
    """Parse a descriptor file; returns the features and ``{"n_bits", "count", "path"}``."""
    path = None
    if isinstance(source, (bytes, bytearray, memoryview)):
        data = bytes(source)
    elif hasattr(source, "read"):
        data = source.read()
    else:
        path = os.fspath(source)
        with open(source, "rb") as fh:
            data = fh.read()
    r = _Reader(data)
    magic, version, width, count = _DESC_HEADER.unpack(r.take(_DESC_HEADER.size, "descriptor header"))
    if magic != DESCRIPTOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DESCRIPTOR_MAGIC!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    try:
        check_n_bits(width)
    except UsageError as exc:
        raise FormatError(str(exc), 5) from None
    if n_bits is not None and width != n_bits:
        raise FormatError(f"descriptor width {width} does not match expected {n_bits}", 5)
    rec = np.dtype([("kp", "<f4", (4,)), ("desc", "u1", (width // 8,))])
    body = len(data) - r.pos
    if body < count * rec.itemsize:
        complete = body // rec.itemsize
        raise FormatError(f"truncated record {complete} of {count}", r.pos + complete * rec.itemsize)
    if body > count * rec.itemsize:
        raise FormatError(f"{body - count * rec.itemsize} trailing bytes", r.pos + count * rec.itemsize)
    records = np.frombuffer(data, dtype=rec, count=count, offset=r.pos)
    kps = records["kp"].astype(np.float32).reshape(-1, 4)
    bad = ~np.isfinite(kps[:, :2]).all(axis=1) | (kps[:, :2] < 0).any(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise FormatError(f"record {i} has an invalid position", r.pos + i * rec.itemsize)
    features = FeatureSet(kps, np.ascontiguousarray(records["desc"]).reshape(-1, width // 8), width)
    return features, {"n_bits": width, "count": count, "path": path}

"""Bit strings, keypoints and Hamming distances.

Descriptors are stored packed, 8 bits per byte.  Bit ``i`` lives in byte
``i // 8`` at position ``i % 8`` counting from the least-significant bit,
which is what ``np.packbits(..., bitorder="little")`` produces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DEFAULT_N_BITS = 256
MAX_N_BITS = 256


class UsageError(ValueError):
    """Raised when an operation is called with incompatible arguments."""


class ConfigurationError(ValueError):
    """Raised when a configuration cannot be satisfied by the inputs."""


class CapacityError(UsageError):
    """Raised when a fixed-width field would overflow."""


class FormatError(ValueError):
    """Raised when a binary file is malformed.

    ``offset`` is the byte position at which the problem was detected.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def check_n_bits(n_bits: int) -> int:
    n_bits = int(n_bits)
    if n_bits <= 0 or n_bits % 8 or n_bits > MAX_N_BITS:
        raise UsageError(f"descriptor width must be a multiple of 8 in [8, {MAX_N_BITS}], got {n_bits}")
    return n_bits


@dataclass(frozen=True)
class BitString:
    """An immutable packed bit string of fixed width."""

    data: bytes
    n_bits: int

    def __post_init__(self):
        if self.n_bits <= 0 or self.n_bits % 8:
            raise UsageError(f"width must be a positive multiple of 8, got {self.n_bits}")
        if len(self.data) != self.n_bits // 8:
            raise UsageError(f"expected {self.n_bits // 8} bytes for {self.n_bits} bits, got {len(self.data)}")

    @classmethod
    def from_bits(cls, bits: Iterable[int]):
        arr = np.asarray(list(bits) if not isinstance(bits, np.ndarray) else bits, dtype=np.uint8)
        if arr.ndim != 1 or np.any(arr > 1):
            raise UsageError("bits must be a flat sequence of 0/1 values")
        return cls(pack_bits(arr).tobytes(), arr.size)

    @classmethod
    def from_array(cls, packed: np.ndarray, n_bits: int | None = None):
        packed = np.ascontiguousarray(packed, dtype=np.uint8).ravel()
        return cls(packed.tobytes(), n_bits if n_bits is not None else packed.size * 8)

    @classmethod
    def zeros(cls, n_bits: int = DEFAULT_N_BITS):
        return cls(bytes(n_bits // 8), n_bits)

    @classmethod
    def ones(cls, n_bits: int = DEFAULT_N_BITS):
        return cls(b"\xff" * (n_bits // 8), n_bits)

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=np.uint8)

    def to_bits(self) -> np.ndarray:
        return unpack_bits(self.to_array(), self.n_bits)

    def __getitem__(self, i: int) -> int:
        if not 0 <= i < self.n_bits:
            raise IndexError(i)
        return (self.data[i >> 3] >> (i & 7)) & 1

    def __len__(self) -> int:
        return self.n_bits


class BinaryDescriptor(BitString):
    """A D-bit local feature descriptor."""


class Substring(BitString):
    """T bits projected out of a descriptor through a dictionary row."""


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float = 1.0
    angle: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)) or self.x < 0 or self.y < 0:
            raise UsageError(f"keypoint position must be finite and non-negative, got ({self.x}, {self.y})")


@dataclass(frozen=True)
class Feature:
    keypoint: Keypoint
    descriptor: BinaryDescriptor


@dataclass
class FeatureSet:
    """Columnar storage for the features of one image.

    ``keypoints`` is float32 of shape (n, 4) holding x, y, scale, angle and
    ``descriptors`` is uint8 of shape (n, n_bits // 8).
    """

    keypoints: np.ndarray
    descriptors: np.ndarray
    n_bits: int = DEFAULT_N_BITS

    def __post_init__(self):
        self.n_bits = check_n_bits(self.n_bits)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float32).reshape(-1, 4)
        self.descriptors = check_descriptors(self.descriptors, self.n_bits)
        if len(self.keypoints) != len(self.descriptors):
            raise UsageError(f"{len(self.keypoints)} keypoints but {len(self.descriptors)} descriptors")

    def __len__(self) -> int:
        return len(self.descriptors)

    @property
    def xy(self) -> np.ndarray:
        return self.keypoints[:, :2]

    @classmethod
    def empty(cls, n_bits: int = DEFAULT_N_BITS) -> "FeatureSet":
        return cls(np.zeros((0, 4), np.float32), np.zeros((0, n_bits // 8), np.uint8), n_bits)

    @classmethod
    def from_features(cls, features: Sequence[Feature], n_bits: int | None = None) -> "FeatureSet":
        if n_bits is None:
            n_bits = features[0].descriptor.n_bits if features else DEFAULT_N_BITS
        kps = np.array([[f.keypoint.x, f.keypoint.y, f.keypoint.scale, f.keypoint.angle] for f in features],
                       dtype=np.float32).reshape(-1, 4)
        descs = check_descriptors([f.descriptor for f in features], n_bits)
        return cls(kps, descs, n_bits)

    def to_features(self) -> list[Feature]:
        out = []
        for kp, d in zip(self.keypoints.tolist(), self.descriptors):
            out.append(Feature(Keypoint(*kp), BinaryDescriptor(d.tobytes(), self.n_bits)))
        return out

    def subset(self, mask) -> "FeatureSet":
        return FeatureSet(self.keypoints[mask], self.descriptors[mask], self.n_bits)


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a (..., n_bits) 0/1 array into (..., n_bits // 8) bytes."""
    return np.packbits(np.asarray(bits, dtype=np.uint8), axis=-1, bitorder="little")


def unpack_bits(packed: np.ndarray, n_bits: int | None = None) -> np.ndarray:
    bits = np.unpackbits(np.asarray(packed, dtype=np.uint8), axis=-1, bitorder="little")
    if n_bits is not None:
        bits = bits[..., :n_bits]
    return bits


def check_descriptors(X, n_bits: int | None = None) -> np.ndarray:
    """Validate descriptors and return them as a C-contiguous (n, n_bytes) uint8 array.

    Accepts a packed uint8 array, a sequence of ``BitString`` or a sequence
    of ``bytes``.
    """
    if isinstance(X, np.ndarray):
        if X.dtype != np.uint8:
            raise UsageError(f"packed descriptors must be uint8, got {X.dtype}")
        arr = X.reshape(1, -1) if X.ndim == 1 else X
    else:
        items = list(X)
        if not items:
            width = (n_bits or DEFAULT_N_BITS) // 8
            return np.zeros((0, width), dtype=np.uint8)
        widths = set()
        rows = []
        for item in items:
            if isinstance(item, BitString):
                widths.add(item.n_bits)
                rows.append(item.data)
            else:
                rows.append(bytes(item))
                widths.add(len(rows[-1]) * 8)
        if len(widths) != 1:
            raise UsageError(f"descriptors have mixed widths: {sorted(widths)}")
        arr = np.frombuffer(b"".join(rows), dtype=np.uint8).reshape(len(rows), -1)
    if arr.ndim != 2:
        raise UsageError(f"expected a 2-D array of packed descriptors, got shape {arr.shape}")
    if n_bits is not None and arr.shape[1] * 8 != n_bits:
        raise UsageError(f"descriptor width {arr.shape[1] * 8} does not match expected {n_bits}")
    return np.ascontiguousarray(arr)


def _as_words(packed: np.ndarray) -> np.ndarray:
    """View packed rows as uint64 words, zero padding to a multiple of 8 bytes."""
    packed = np.ascontiguousarray(packed, dtype=np.uint8)
    pad = (-packed.shape[-1]) % 8
    if pad:
        packed = np.concatenate([packed, np.zeros(packed.shape[:-1] + (pad,), np.uint8)], axis=-1)
    return packed.view(np.uint64)


def hamming_distance(a: BitString, b: BitString) -> int:
    if a.n_bits != b.n_bits:
        raise UsageError(f"width mismatch: {a.n_bits} vs {b.n_bits}")
    return int(np.bitwise_count(a.to_array() ^ b.to_array()).sum())


def hamming_distance_sub(a: Substring, b: Substring) -> int:
    return hamming_distance(a, b)


def cdist_hamming(A: np.ndarray, B: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """All-pairs Hamming distances between packed rows, shape (len(A), len(B)).

    Uses |a| + |b| - 2 a.b over unpacked bits; float32 is exact while the
    width stays below 2**24.
    """
    if A.shape[-1] != B.shape[-1]:
        raise UsageError(f"width mismatch: {A.shape[-1] * 8} vs {B.shape[-1] * 8}")
    Bbits = np.unpackbits(B, axis=1).astype(np.float32)
    Bpop = Bbits.sum(axis=1)
    out = np.empty((len(A), len(B)), dtype=np.int32)
    for start in range(0, len(A), chunk):
        Abits = np.unpackbits(A[start:start + chunk], axis=1).astype(np.float32)
        d = Abits.sum(axis=1)[:, None] + Bpop[None, :] - 2.0 * (Abits @ Bbits.T)
        out[start:start + chunk] = d
    return out


def rowwise_hamming(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Hamming distance between matching rows of A and B (broadcasting allowed)."""
    return np.bitwise_count(np.bitwise_xor(A, B)).sum(axis=-1, dtype=np.int32)

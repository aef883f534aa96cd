import io
import struct

import numpy as np
import pytest

from bvsearch.core import CapacityError, FeatureSet, FormatError, UsageError
from bvsearch.index import (
    add_image,
    layout_sizes,
    load,
    read_descriptor_file,
    round_positions,
    to_bytes,
    write_descriptor_file,
)

from conftest import make_state, random_fs


def test_empty_image_only_counts(rng):
    s = make_state(rng)
    add_image(0, FeatureSet.empty(), s)
    assert s.index.n_images == 1 and s.index.n_entries == 0
    assert s.index.features_per_image == [0]


def test_centroid_feature_lands_in_its_list(rng):
    s = make_state(rng)
    fs = FeatureSet(np.array([[10.4, 20.6, 1, 0]]), s.vocabulary.centroids[12:13].copy())
    add_image(0, fs, s)
    assert s.index.posting_lengths().tolist() == [0] * 12 + [1] + [0] * 3
    e = s.index.postings(12).entry(0)
    assert (e.image_id, e.x, e.y) == (0, 10, 21)
    assert s.index.doc_freq[12] == 1


def test_ids_must_be_dense(rng):
    s = make_state(rng)
    with pytest.raises(UsageError):
        add_image(1, FeatureSet.empty(), s)


def test_capacity(rng):
    s = make_state(rng)
    s.index.features_per_image = [0] * 65535
    with pytest.raises(CapacityError):
        add_image(65535, FeatureSet.empty(), s)


def test_rounding_and_clamping():
    xy = np.array([[0.49, 0.5], [1.5, 2.4999], [70000.0, 65535.4]])
    assert round_positions(xy).tolist() == [[0, 1], [2, 2], [65535, 65535]]


def test_index_invariants(rng):
    s = make_state(rng)
    originals = []
    for i in range(5):
        fs = random_fs(rng, int(rng.integers(0, 60)))
        originals.append(fs)
        add_image(i, fs, s)
    idx = s.index
    assert idx.posting_lengths().sum() == sum(len(f) for f in originals) == idx.n_entries
    assert np.all(idx.image_ids < idx.n_images)
    assert np.all(idx.doc_freq <= idx.n_images)
    assert np.array_equal(idx.doc_freq == 0, idx.posting_lengths() == 0)
    # stored substrings are re-derivable from the originals
    for i, fs in enumerate(originals):
        words, subs = s.encode(fs)
        for w, sub in zip(words, subs):
            post = idx.postings(int(w))
            hit = (post.image_ids == i) & np.all(post.substrings == sub, axis=1)
            assert hit.any()


def test_posting_order_is_insertion_order(rng):
    s = make_state(rng, n_words=2)
    d = s.vocabulary.centroids[1:2].copy()
    for i in range(3):
        add_image(i, FeatureSet(np.array([[i, i, 1, 0]]), d), s)
    assert s.index.postings(1).image_ids.tolist() == [0, 1, 2]


def test_save_load_round_trip(rng):
    s = make_state(rng)
    for i in range(4):
        add_image(i, random_fs(rng, 50), s)
    blob = to_bytes(s)
    back = load(blob)
    assert back == s
    assert to_bytes(back) == blob


def test_serialized_size_predictable(rng):
    s = make_state(rng, n_words=32, t_bits=16)
    for i in range(3):
        add_image(i, random_fs(rng, 40), s)
    blob = to_bytes(s)
    sizes = layout_sizes(256, 32, 16, 3, 120)
    assert len(blob) == sizes["total"]
    assert sizes["postings"] == 120 * (6 + 2)
    expected = 17 + 32 * 32 + 32 * 16 + sum(8 + n * 8 for n in s.index.posting_lengths()) + 32 * 4 + 3 * 4
    assert len(blob) == expected


def test_header_layout(rng):
    s = make_state(rng)
    blob = to_bytes(s)
    assert blob[:4] == b"BFIX"
    assert struct.unpack("<BHIHI", blob[4:17]) == (1, 256, 16, 64, 0)


def test_load_errors(rng):
    s = make_state(rng)
    add_image(0, random_fs(rng, 20), s)
    blob = to_bytes(s)
    with pytest.raises(FormatError, match="magic"):
        load(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="version"):
        load(blob[:4] + b"\x02" + blob[5:])
    with pytest.raises(FormatError) as exc:
        load(blob[:-3])
    assert exc.value.offset is not None
    with pytest.raises(FormatError, match="trailing"):
        load(blob + b"\x00")
    bad = bytearray(blob)
    struct.pack_into("<I", bad, 13, 0)  # n_images = 0 while entries reference image 0
    with pytest.raises(FormatError):
        load(bytes(bad))


def test_descriptor_file_single_record():
    fs = FeatureSet(np.array([[10.5, 20.25, 2.0, 1.0]]), np.arange(32, dtype=np.uint8).reshape(1, 32))
    buf = io.BytesIO()
    n = write_descriptor_file(buf, fs)
    assert n == 11 + 16 + 32
    back, meta = read_descriptor_file(buf.getvalue())
    assert meta["count"] == 1 and meta["n_bits"] == 256
    f = back.to_features()[0]
    assert (f.keypoint.x, f.keypoint.y) == (10.5, 20.25)
    assert f.descriptor.data == bytes(range(32))


def test_descriptor_file_empty_and_round_trip(rng, tmp_path):
    buf = io.BytesIO()
    write_descriptor_file(buf, FeatureSet.empty())
    assert len(read_descriptor_file(buf.getvalue())[0]) == 0
    fs = random_fs(rng, 1000)
    path = tmp_path / "a.bfds"
    write_descriptor_file(path, fs)
    back, _ = read_descriptor_file(path)
    assert np.array_equal(back.keypoints, fs.keypoints)
    assert np.array_equal(back.descriptors, fs.descriptors)


def test_descriptor_file_errors(rng):
    buf = io.BytesIO()
    write_descriptor_file(buf, random_fs(rng, 3))
    data = buf.getvalue()
    with pytest.raises(FormatError, match="magic"):
        read_descriptor_file(b"BFXX" + data[4:])
    with pytest.raises(FormatError, match="width"):
        read_descriptor_file(data, n_bits=128)
    with pytest.raises(FormatError) as exc:
        read_descriptor_file(data[:-5])
    assert exc.value.offset == 11 + 2 * 48
    with pytest.raises(FormatError):
        read_descriptor_file(data[:6])

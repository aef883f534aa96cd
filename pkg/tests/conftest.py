import numpy as np
import pytest

_ACCEPTANCE = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in _ACCEPTANCE:
        terminalreporter.write_line(line)


def random_packed(rng, n, n_bits=256):
    return rng.integers(0, 256, (n, n_bits // 8), dtype=np.uint8)


def bitloop_hamming(a: bytes, b: bytes) -> int:
    """Count differing bits one position at a time."""
    total = 0
    for x, y in zip(a, b):
        for k in range(8):
            total += ((x >> k) & 1) != ((y >> k) & 1)
    return total


def make_state(rng, n_words=16, t_bits=64):
    """Random vocabulary and dictionary with an empty index."""
    from bvsearch.index import EngineState
    from bvsearch.substring import SubstringDictionary
    from bvsearch.vocabulary import Vocabulary

    vocab = Vocabulary(random_packed(rng, n_words), 256)
    dic = SubstringDictionary(np.array([rng.permutation(256)[:t_bits] for _ in range(n_words)]), 256)
    return EngineState(vocab, dic)


def random_fs(rng, n, width=640, height=480):
    from bvsearch.core import FeatureSet

    kps = np.column_stack([rng.uniform(0, width, n), rng.uniform(0, height, n),
                           rng.uniform(1, 5, n), rng.uniform(0, 6, n)])
    return FeatureSet(kps, random_packed(rng, n))

import glob
import os
import sysconfig

import numpy as np
import pytest

from shaq import tensor as T

CORPUS_BYTES = 1_000_000


@pytest.fixture(autouse=True)
def float64_default():
    """Unit tests run in double precision unless a test opts out."""
    with T.default_dtype(np.float64):
        yield


def stdlib_corpus(n_bytes: int = CORPUS_BYTES) -> bytes:
    """First ``n_bytes`` of the interpreter's own top-level stdlib sources, in sorted order."""
    files = sorted(glob.glob(os.path.join(sysconfig.get_paths()["stdlib"], "*.py")))
    chunks, total = [], 0
    for path in files:
        with open(path, "rb") as fh:
            data = fh.read()
        chunks.append(data)
        total += len(data)
        if total >= n_bytes:
            break
    raw = b"".join(chunks)[:n_bytes]
    if len(raw) < n_bytes:
        pytest.skip(f"stdlib sources provide only {len(raw)} bytes")
    return raw


@pytest.fixture(scope="session")
def corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "stdlib_1mb.bin"
    path.write_bytes(stdlib_corpus())
    return str(path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

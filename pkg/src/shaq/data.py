"""Byte corpus loading, 90/5/5 splits, and the variable-length window batcher."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

MIN_LEN = 5
LENGTH_SIGMA = 5.0
HALF_CENTER_PROB = 0.05


class CorpusError(ValueError):
    """The corpus file is missing, empty, or too short."""


class EndOfTrack(Exception):
    """No full window of at least ``min_len`` bytes remains; the epoch is over."""


@dataclass(frozen=True)
class CorpusSplits:
    train: bytes
    valid: bytes
    test: bytes
    source: str
    total: int

    def __post_init__(self):
        if len(self.train) + len(self.valid) + len(self.test) != self.total:
            raise ValueError("splits do not partition the corpus")


def split_bytes(raw: bytes, source: str = "<memory>") -> CorpusSplits:
    """Valid and test get ``floor(0.05 n)`` bytes each; train keeps the remainder."""
    n = len(raw)
    held = n * 5 // 100
    n_train = n - 2 * held
    return CorpusSplits(raw[:n_train], raw[n_train : n_train + held], raw[n_train + held :], source, n)


def load_corpus(path: str | os.PathLike, batch_size: int = 16, limit: int | None = None) -> CorpusSplits:
    """Read ``path`` verbatim (optionally only its first ``limit`` bytes) and split it."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise CorpusError(f"corpus file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read() if limit is None else fh.read(limit)
    if not raw:
        raise CorpusError(f"corpus file is empty: {path}")
    if len(raw) < 10 * batch_size:
        raise CorpusError(f"corpus {path} has {len(raw)} bytes; batch size {batch_size} needs at least {10 * batch_size}")
    return split_bytes(raw, path)


def batchify(split: bytes | np.ndarray, batch_size: int) -> np.ndarray:
    """Cut a byte stream into ``batch_size`` contiguous tracks: ``[N // B, B]`` int64 ids.

    Column ``i`` holds bytes ``i*n .. (i+1)*n - 1``; the trailing remainder is dropped.
    """
    data = np.frombuffer(split, dtype=np.uint8) if isinstance(split, (bytes, bytearray)) else np.asarray(split)
    if batch_size < 1:
        raise ValueError(f"batch size must be positive, got {batch_size}")
    if batch_size > data.size:
        raise ValueError(f"batch size {batch_size} exceeds stream length {data.size}")
    n = data.size // batch_size
    return data[: n * batch_size].reshape(batch_size, n).T.astype(np.int64)


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int = 16
    center: int = 256
    min_len: int = MIN_LEN
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.min_len < MIN_LEN:
            raise ValueError(f"min_len must be >= {MIN_LEN}, got {self.min_len}")
        if self.center < self.min_len:
            raise ValueError(f"center ({self.center}) must be >= min_len ({self.min_len})")

    def expected_length(self) -> float:
        """Mean window length before clamping, for the declared length law."""
        return (1 - HALF_CENTER_PROB) * self.center + HALF_CENTER_PROB * self.center / 2


@dataclass(frozen=True)
class Cursor:
    """Position in a track matrix ``[n, B]``."""

    tracks: np.ndarray
    pos: int = 0


def sample_length(plan: BatchPlan, rng: np.random.Generator) -> int:
    center = plan.center / 2 if rng.random() < HALF_CENTER_PROB else plan.center
    return max(plan.min_len, int(round(rng.normal(center, LENGTH_SIGMA))))


def next_window(
    plan: BatchPlan, cursor: Cursor, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray, Cursor]:
    """Draw one window; with ``rng=None`` the length is fixed at ``plan.center``.

    The final window of a track is shortened to what remains.  Raises
    ``EndOfTrack`` once fewer than ``min_len`` target positions are left.
    """
    n = cursor.tracks.shape[0]
    if not 0 <= cursor.pos <= n:
        raise ValueError(f"cursor {cursor.pos} outside track of length {n}")
    remaining = n - 1 - cursor.pos
    if remaining < plan.min_len:
        raise EndOfTrack(cursor.pos)
    length = plan.center if rng is None else sample_length(plan, rng)
    length = min(length, remaining)
    start = cursor.pos
    inputs = cursor.tracks[start : start + length]
    targets = cursor.tracks[start + 1 : start + 1 + length]
    return inputs, targets, Cursor(cursor.tracks, start + length)


def iter_windows(plan: BatchPlan, tracks: np.ndarray, rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    cursor = Cursor(tracks)
    while True:
        try:
            x, y, cursor = next_window(plan, cursor, rng)
        except EndOfTrack:
            return
        yield x, y

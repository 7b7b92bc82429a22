"""Token grids and the codebook delay pattern.

A token grid is the discrete representation of one audio stream: T frames by
n_q residual quantizer levels, codes in [0, vocab). Frame rate is fixed at
50 Hz. The delay pattern shifts level l by l frames so that one autoregressive
step emits one code per level while respecting the coarse-to-fine dependency;
it lengthens the stream by n_q-1 frames and fills the two triangular corners
with a sentinel (code == vocab, one past the data range).

Grid files (.tgrd) are little-endian binary:

    magic   4 bytes  b"TGRD"
    version u32      1
    frames  u32      T
    n_q     u32
    vocab   u32      <= 65536 (codes are u16)
    codes   T*n_q u16, row-major (frame-major)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

FRAME_RATE = 50  # frames per second, fixed for the whole pipeline

_MAGIC = b"TGRD"
_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class GridError(ValueError):
    pass


def _check_codes(codes: np.ndarray, vocab: int, upper: int) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise GridError(f"codes must be 2-D (frames, n_q), got shape {codes.shape}")
    if not np.issubdtype(codes.dtype, np.integer):
        raise GridError(f"codes must be integers, got dtype {codes.dtype}")
    if vocab < 1:
        raise GridError(f"vocab must be >= 1, got {vocab}")
    if codes.size and (codes.min() < 0 or codes.max() >= upper):
        raise GridError(
            f"codes out of range: [{codes.min()}, {codes.max()}] not within [0, {upper})"
        )
    return codes.astype(np.int32, copy=False)


@dataclass(frozen=True)
class TokenGrid:
    """T x n_q codes in [0, vocab)."""

    codes: np.ndarray
    vocab: int

    def __post_init__(self):
        object.__setattr__(self, "codes", _check_codes(self.codes, self.vocab, self.vocab))

    @property
    def frames(self) -> int:
        return self.codes.shape[0]

    @property
    def n_q(self) -> int:
        return self.codes.shape[1]

    @property
    def seconds(self) -> float:
        return self.frames / FRAME_RATE

    def slice_frames(self, start: int, stop: int) -> "TokenGrid":
        if not (0 <= start <= stop <= self.frames):
            raise GridError(f"slice [{start}, {stop}) outside grid of {self.frames} frames")
        return TokenGrid(self.codes[start:stop].copy(), self.vocab)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return self.vocab == other.vocab and np.array_equal(self.codes, other.codes)


@dataclass(frozen=True)
class DelayedGrid:
    """(T + n_q - 1) x n_q codes in [0, vocab]; vocab itself is the sentinel."""

    codes: np.ndarray
    vocab: int

    def __post_init__(self):
        object.__setattr__(self, "codes", _check_codes(self.codes, self.vocab, self.vocab + 1))

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def n_q(self) -> int:
        return self.codes.shape[1]

    @property
    def sentinel(self) -> int:
        return self.vocab

    def __eq__(self, other) -> bool:
        if not isinstance(other, DelayedGrid):
            return NotImplemented
        return self.vocab == other.vocab and np.array_equal(self.codes, other.codes)


def sentinel_mask(frames: int, n_q: int) -> np.ndarray:
    """Boolean (frames + n_q - 1, n_q) mask of the delayed grid's sentinel corners."""
    rows = frames + n_q - 1
    tau = np.arange(rows)[:, None]
    lvl = np.arange(n_q)[None, :]
    src = tau - lvl
    return (src < 0) | (src >= frames)


def apply_delay(grid: TokenGrid) -> DelayedGrid:
    """Delayed row tau carries level l of source frame tau - l."""
    t, n_q = grid.frames, grid.n_q
    out = np.full((t + n_q - 1, n_q), grid.vocab, dtype=np.int32)
    for l in range(n_q):
        out[l : l + t, l] = grid.codes[:, l]
    return DelayedGrid(out, grid.vocab)


def undo_delay(delayed: DelayedGrid) -> TokenGrid:
    """Inverse of apply_delay. Validates sentinel placement exactly."""
    rows, n_q = delayed.rows, delayed.n_q
    t = rows - (n_q - 1)
    if t < 0:
        raise GridError(f"delayed grid with {rows} rows cannot have n_q={n_q}")
    expect = sentinel_mask(t, n_q)
    got = delayed.codes == delayed.vocab
    if not np.array_equal(expect, got):
        bad = int(np.argmax((expect != got).any(axis=1)))
        raise GridError(f"sentinel placement invalid at row {bad}")
    out = np.empty((t, n_q), dtype=np.int32)
    for l in range(n_q):
        out[:, l] = delayed.codes[l : l + t, l]
    return TokenGrid(out, delayed.vocab)


def delay_latency_frames(n_q: int) -> int:
    return n_q - 1


def delay_latency_seconds(n_q: int, frame_rate: int = FRAME_RATE) -> float:
    return (n_q - 1) / frame_rate


def seconds_to_frames(seconds: float, frame_rate: int = FRAME_RATE) -> int:
    """Exact conversion; raises if the duration is not a whole number of frames."""
    frames = Fraction(seconds).limit_denominator(10**9) * frame_rate
    if frames.denominator != 1:
        raise GridError(f"{seconds} s is not a whole number of frames at {frame_rate} Hz")
    return int(frames)


def frames_to_seconds(frames: int, frame_rate: int = FRAME_RATE) -> float:
    return frames / frame_rate


def write_grid(path, grid: TokenGrid) -> None:
    if grid.vocab > 65536:
        raise GridError(f"vocab {grid.vocab} does not fit u16 codes")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, grid.frames, grid.n_q, grid.vocab))
        f.write(grid.codes.astype("<u2").tobytes())


def read_grid(path) -> TokenGrid:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise GridError(f"{path}: truncated header")
    magic, version, frames, n_q, vocab = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise GridError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise GridError(f"{path}: unsupported version {version}")
    body = raw[_HEADER.size :]
    want = frames * n_q * 2
    if len(body) != want:
        raise GridError(f"{path}: expected {want} payload bytes, got {len(body)}")
    codes = np.frombuffer(body, dtype="<u2").astype(np.int32).reshape(frames, n_q)
    if codes.size and codes.max() >= vocab:
        raise GridError(f"{path}: code {codes.max()} >= vocab {vocab}")
    return TokenGrid(codes, vocab)

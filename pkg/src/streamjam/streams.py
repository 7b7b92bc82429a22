"""(t_f, k) stream alignment between an input mix and a delayed target stream.

t_f is future visibility in frames: t_f > 0 means the predictor may look
t_f frames ahead in the input (the output is deferred), t_f < 0 means the
output must be produced |t_f| frames before the corresponding input arrives
(the input is late). k is the chunk length: how many delayed output frames
are emitted per model call; within a chunk no fresh input becomes visible.

Sequence layout, 0-indexed positions, S = max(t_f, 0), Q = max(-t_f, 0),
delayed rows T' = T + n_q - 1:

    position 0           instrument token on the output side
    positions 1..S       output pad tokens (t_f > 0 defers the output)
    position 1 + S + tau delayed output row tau, tau in [0, T')
    input frame i        fused at position S + i - t_f (so for t_f < 0 the
                         first Q positions carry the input pad embedding)

The position predicting delayed row tau is S + tau and fuses input frame
tau + t_f: mutating any input frame beyond that cannot reach it under the
causal mask. Input frames that would land beyond the last position are
dropped (nothing ever conditions on them); missing input frames (short grid,
or positions past the input's end) fuse the learned input pad embedding,
marked here as code -1.

Output codes are in model space: data [0, V), pad V, sentinel V+1, mask V+2.
The delayed grid's own sentinel (V in grid space) is remapped to V+1.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .grids import FRAME_RATE, TokenGrid, apply_delay, seconds_to_frames

INPUT_PAD = -1  # marker in input_codes: fuse the learned pad embedding


class AlignmentError(ValueError):
    pass


def pad_code(vocab: int) -> int:
    return vocab


def sentinel_code(vocab: int) -> int:
    return vocab + 1


def mask_code(vocab: int) -> int:
    return vocab + 2


def model_vocab(vocab: int) -> int:
    return vocab + 3


@dataclass(frozen=True)
class StreamSpec:
    """Future visibility and chunk length, both in frames."""

    t_f: int
    k: int = 1

    def __post_init__(self):
        if not isinstance(self.t_f, (int, np.integer)) or isinstance(self.t_f, bool):
            raise AlignmentError(f"t_f must be an integer frame count, got {self.t_f!r}")
        if not isinstance(self.k, (int, np.integer)) or self.k < 1:
            raise AlignmentError(f"k must be a positive integer, got {self.k!r}")
        object.__setattr__(self, "t_f", int(self.t_f))
        object.__setattr__(self, "k", int(self.k))

    @classmethod
    def from_seconds(cls, t_f_seconds: float, k_seconds: float) -> "StreamSpec":
        return cls(seconds_to_frames(t_f_seconds), seconds_to_frames(k_seconds))

    def to_seconds(self) -> tuple:
        return self.t_f / FRAME_RATE, self.k / FRAME_RATE

    def lead_time_seconds(self) -> Fraction:
        """lambda = -t_f as exact seconds; positive when generating ahead."""
        return Fraction(-self.t_f, FRAME_RATE)


@dataclass(frozen=True)
class Layout:
    """Index arithmetic for one aligned sequence."""

    t_f: int
    n_q: int
    source_frames: int

    @property
    def delayed_rows(self) -> int:
        return self.source_frames + self.n_q - 1

    @property
    def s_pad(self) -> int:
        return max(self.t_f, 0)

    @property
    def q_pad(self) -> int:
        return max(-self.t_f, 0)

    @property
    def length(self) -> int:
        return 1 + self.s_pad + self.delayed_rows

    def row_position(self, tau: int) -> int:
        return 1 + self.s_pad + tau

    def predictor_position(self, tau: int) -> int:
        return self.s_pad + tau

    def input_frame_at(self, position: int) -> int:
        """Input frame fused at a position; may be out of the grid's range."""
        return position - self.s_pad + self.t_f


@dataclass
class AlignedSequence:
    input_codes: np.ndarray  # (L, n_q) int32, INPUT_PAD where no input frame
    output_codes: np.ndarray  # (L, n_q) int32 model space; -1 at the instrument slot
    instrument: int
    loss_mask: np.ndarray  # (L,) bool: the NEXT position's output is a loss target
    spec: StreamSpec
    source_frames: int
    vocab: int

    @property
    def length(self) -> int:
        return self.input_codes.shape[0]

    @property
    def n_q(self) -> int:
        return self.input_codes.shape[1]

    def targets(self) -> np.ndarray:
        """(L, n_q) next-position output codes; last row is -1 (never included)."""
        t = np.full_like(self.output_codes, -1)
        t[:-1] = self.output_codes[1:]
        return t

    def target_include(self) -> np.ndarray:
        """(L, n_q) bool: loss entries, sentinel targets excluded per level."""
        t = self.targets()
        return self.loss_mask[:, None] & (t != sentinel_code(self.vocab)) & (t >= 0)


def input_side(layout: Layout, input_grid: TokenGrid) -> np.ndarray:
    l, n_q = layout.length, layout.n_q
    codes = np.full((l, n_q), INPUT_PAD, dtype=np.int32)
    t_in = input_grid.frames
    # input frame i sits at position s_pad + i - t_f when inside [0, L)
    first = layout.s_pad - layout.t_f  # position of input frame 0
    lo_frame = max(0, -first)
    hi_frame = min(t_in, l - first)
    if hi_frame > lo_frame:
        codes[first + lo_frame : first + hi_frame] = input_grid.codes[lo_frame:hi_frame]
    return codes


def _output_side(layout: Layout, target_grid: TokenGrid, vocab: int) -> np.ndarray:
    l, n_q = layout.length, layout.n_q
    delayed = apply_delay(target_grid).codes
    out = np.full((l, n_q), pad_code(vocab), dtype=np.int32)
    out[0] = -1  # instrument slot
    out[1 + layout.s_pad :] = np.where(delayed == vocab, sentinel_code(vocab), delayed)
    return out


def _check_pair(input_grid: TokenGrid, target_grid: TokenGrid) -> None:
    if input_grid.vocab != target_grid.vocab:
        raise AlignmentError("input and target vocab differ")
    if input_grid.n_q != target_grid.n_q:
        raise AlignmentError("input and target n_q differ")


def align(
    input_grid: TokenGrid, target_grid: TokenGrid, instrument: int, spec: StreamSpec
) -> AlignedSequence:
    """Full-sequence alignment; every real output row carries loss (k=1 training)."""
    _check_pair(input_grid, target_grid)
    if instrument < 0:
        raise AlignmentError(f"instrument must be >= 0, got {instrument}")
    lay = Layout(spec.t_f, target_grid.n_q, target_grid.frames)
    vocab = target_grid.vocab
    loss = np.zeros(lay.length, dtype=bool)
    loss[lay.s_pad : lay.s_pad + lay.delayed_rows] = True
    return AlignedSequence(
        input_codes=input_side(lay, input_grid),
        output_codes=_output_side(lay, target_grid, vocab),
        instrument=instrument,
        loss_mask=loss,
        spec=spec,
        source_frames=target_grid.frames,
        vocab=vocab,
    )


def chunk_starts(source_frames: int, k: int) -> np.ndarray:
    """Admissible prefix lengths {0, k, 2k, ...}; truncates a ragged tail."""
    m = (source_frames // k) * k
    if m < k:
        raise AlignmentError(f"no full chunk of {k} frames in {source_frames}")
    return np.arange(0, m - k + 1, k)


def sample_prefix_example(
    input_grid: TokenGrid,
    target_grid: TokenGrid,
    instrument: int,
    spec: StreamSpec,
    seed,
) -> AlignedSequence:
    """Variable-prefix training draw for k > 1.

    The sequence is the fused prefix (delayed rows < l) followed by the k
    chunk rows, whose input side is the pad embedding: a chunk never sees
    input beyond its start visibility. Loss covers exactly the k chunk rows.
    """
    _check_pair(input_grid, target_grid)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    k = spec.k
    starts = chunk_starts(target_grid.frames, k)
    l_chunk = int(starts[rng.integers(0, len(starts))])

    full = align(input_grid, target_grid, instrument, spec)
    lay = Layout(spec.t_f, target_grid.n_q, target_grid.frames)
    p = lay.row_position(l_chunk)  # first chunk row's position
    end = p + k
    input_codes = full.input_codes[:end].copy()
    input_codes[p:end] = INPUT_PAD
    loss = np.zeros(end, dtype=bool)
    loss[p - 1 : end - 1] = True
    return AlignedSequence(
        input_codes=input_codes,
        output_codes=full.output_codes[:end].copy(),
        instrument=instrument,
        loss_mask=loss,
        spec=spec,
        source_frames=target_grid.frames,
        vocab=full.vocab,
    )


def collate(seqs: list) -> dict:
    """Stack aligned sequences, padding ragged tails with inert rows."""
    if not seqs:
        raise AlignmentError("empty batch")
    n_q = seqs[0].n_q
    vocab = seqs[0].vocab
    if any(s.n_q != n_q or s.vocab != vocab for s in seqs):
        raise AlignmentError("batch mixes n_q or vocab")
    lmax = max(s.length for s in seqs)
    b = len(seqs)
    inp = np.full((b, lmax, n_q), INPUT_PAD, dtype=np.int32)
    out = np.full((b, lmax, n_q), pad_code(vocab), dtype=np.int32)
    tgt = np.full((b, lmax, n_q), -1, dtype=np.int32)
    inc = np.zeros((b, lmax, n_q), dtype=bool)
    inst = np.zeros(b, dtype=np.int32)
    lengths = np.zeros(b, dtype=np.int32)
    for i, s in enumerate(seqs):
        l = s.length
        inp[i, :l] = s.input_codes
        out[i, :l] = s.output_codes
        tgt[i, :l] = s.targets()
        inc[i, :l] = s.target_include()
        inst[i] = s.instrument
        lengths[i] = l
    return {
        "input_codes": inp,
        "output_codes": out,
        "targets": tgt,
        "include": inc,
        "instrument": inst,
        "lengths": lengths,
    }

"""Inference: frame-wise and chunked autoregressive decoding, masked decoding.

Chunked decoding walks the delayed-row timeline in calls of k rows.  Fresh
input enters only at call boundaries: the previous chunk's rows are rewound
and re-fed with their now-available input frames, then the next k rows are
generated with the input side padded, mirroring the prefix-training setup.
The final call also emits the n_q-1 closing rows of the delay pattern, so
T output frames always take ceil(T/k) calls.
"""

import math
import time
from dataclasses import dataclass

import numpy as np

from .grids import DelayedGrid, TokenGrid, undo_delay
from .model import Model
from .streams import (
    INPUT_PAD,
    Layout,
    StreamSpec,
    input_side,
    mask_code,
    pad_code,
    sentinel_code,
)

FREE = -1  # marker in the forced-token table


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class SampleConfig:
    temperature: float = 1.0
    top_k: int = 200
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise DecodeError(f"temperature must be > 0, got {self.temperature}")
        if self.top_k < 1:
            raise DecodeError(f"top_k must be >= 1, got {self.top_k}")


def sample_token(logits: np.ndarray, cfg: SampleConfig, rng) -> int:
    """Draw one code from the top-k renormalized distribution.

    top_k=1 is exact argmax and consumes no randomness.
    """
    if logits.ndim != 1:
        raise DecodeError("sample_token wants a 1-d logit row")
    k = min(cfg.top_k, logits.size)
    if k == 1:
        return int(np.argmax(logits))
    thresh = np.partition(logits, logits.size - k)[logits.size - k]
    keep = np.flatnonzero(logits >= thresh)
    scaled = logits[keep] / cfg.temperature + rng.gumbel(size=keep.size)
    return int(keep[np.argmax(scaled)])


def required_input_frames(spec: StreamSpec) -> int:
    return max(1, spec.t_f + 1)


@dataclass
class GenResult:
    grid: TokenGrid
    chunk_rows: list
    chunk_seconds: list


@dataclass
class BatchGenResult:
    grids: list
    chunk_rows: list
    chunk_seconds: list


def _forced_table(frames: int, n_q: int, vocab: int, prompt) -> np.ndarray:
    """Per-row forced tokens: delay-pattern sentinels plus a warm-start prefix."""
    rows = frames + n_q - 1
    forced = np.full((rows, n_q), FREE, dtype=np.int64)
    sent = sentinel_code(vocab)
    for level in range(n_q):
        src = np.arange(rows) - level
        forced[(src < 0) | (src >= frames), level] = sent
        if prompt is not None:
            vis = (src >= 0) & (src < prompt.frames)
            forced[vis, level] = prompt.codes[src[vis], level]
    return forced


def _check_inputs(model: Model, grids, instruments, spec, num_frames, prompts):
    cfg = model.config
    if not grids:
        raise DecodeError("no input streams")
    t_in = grids[0].frames
    for g in grids:
        if g.n_q != cfg.n_q or g.vocab != cfg.vocab:
            raise DecodeError("input grid shape does not match the model")
        if g.frames != t_in:
            raise DecodeError("batched inputs must share a frame count")
    if t_in < required_input_frames(spec):
        raise DecodeError(
            f"t_f={spec.t_f} needs at least {required_input_frames(spec)} input "
            f"frames, got {t_in}"
        )
    if len(instruments) != len(grids):
        raise DecodeError("one instrument per stream")
    frames = t_in if num_frames is None else int(num_frames)
    if frames < 1:
        raise DecodeError("num_frames must be >= 1")
    if prompts is not None:
        if len(prompts) != len(grids):
            raise DecodeError("one prompt per stream")
        for p in prompts:
            if p is None:
                continue
            if p.n_q != cfg.n_q or p.vocab != cfg.vocab:
                raise DecodeError("prompt grid shape does not match the model")
            if p.frames > frames:
                raise DecodeError("prompt longer than the requested output")
    return frames


def stream_generate_batch(
    model: Model,
    input_grids,
    instruments,
    spec: StreamSpec,
    cfg: SampleConfig,
    num_frames=None,
    prompts=None,
    seeds=None,
) -> BatchGenResult:
    """Decode a batch of streams that share (t_f, k) and frame count.

    Each stream consumes its own random stream, so results do not depend
    on how examples are grouped into batches.
    """
    frames = _check_inputs(model, input_grids, instruments, spec, num_frames, prompts)
    mcfg = model.config
    n_q, vocab = mcfg.n_q, mcfg.vocab
    b = len(input_grids)
    if seeds is None:
        seeds = np.random.SeedSequence(cfg.seed).spawn(b)
    if len(seeds) != b:
        raise DecodeError("one seed per stream")
    rngs = [np.random.default_rng(s) for s in seeds]

    lay = Layout(spec.t_f, n_q, frames)
    rows = lay.delayed_rows
    inst = np.asarray(instruments, dtype=np.int64)
    ic_full = np.stack([input_side(lay, g) for g in input_grids])
    forced = np.stack(
        [
            _forced_table(frames, n_q, vocab, None if prompts is None else prompts[i])
            for i in range(b)
        ]
    )
    out_rows = np.full((b, rows, n_q), FREE, dtype=np.int64)
    pad = pad_code(vocab)
    pad_row = np.full((1, 1, n_q), INPUT_PAD, dtype=np.int32)

    n_calls = max(1, math.ceil(frames / spec.k))
    cache = model.new_cache(b, lay.length)
    chunk_rows, chunk_seconds = [], []
    greedy = cfg.top_k == 1

    for j in range(n_calls):
        start = j * spec.k
        end = min((j + 1) * spec.k, rows) if j < n_calls - 1 else rows
        t0 = time.perf_counter()
        if j == 0:
            # instrument slot plus the t_f>0 output padding, with real input
            n = lay.s_pad + 1
            oc = np.full((b, n, n_q), pad, dtype=np.int64)
            oc[:, 0] = -1
            logits = model.forward_cached(ic_full[:, :n], oc, inst, cache)
        else:
            # rewind the previous chunk and re-feed it with its real input
            base = 1 + lay.s_pad + start - spec.k
            cache.trim(base)
            oc = out_rows[:, start - spec.k : start]
            logits = model.forward_cached(
                ic_full[:, base : base + spec.k], oc, inst, cache
            )
        for tau in range(start, end):
            if tau > start:
                logits = model.forward_cached(
                    np.broadcast_to(pad_row, (b, 1, n_q)),
                    out_rows[:, tau - 1 : tau],
                    inst,
                    cache,
                )
            row = np.empty((b, n_q), dtype=np.int64)
            for level in range(n_q):
                last = logits[level][:, -1, :vocab]
                if greedy:
                    row[:, level] = np.argmax(last, axis=1)
                else:
                    for i in range(b):
                        row[i, level] = sample_token(last[i], cfg, rngs[i])
            f = forced[:, tau]
            out_rows[:, tau] = np.where(f != FREE, f, row)
        chunk_rows.append(end - start)
        chunk_seconds.append(time.perf_counter() - t0)

    sent_model = sentinel_code(vocab)
    grids = []
    for i in range(b):
        codes = out_rows[i]
        codes = np.where(codes == sent_model, vocab, codes)
        grids.append(undo_delay(DelayedGrid(codes.astype(np.int32), vocab)))
    return BatchGenResult(grids=grids, chunk_rows=chunk_rows, chunk_seconds=chunk_seconds)


def stream_generate(
    model: Model,
    input_grid: TokenGrid,
    instrument: int,
    spec: StreamSpec,
    cfg: SampleConfig,
    num_frames=None,
    prompt=None,
) -> GenResult:
    """Single-stream chunked decode; see stream_generate_batch."""
    res = stream_generate_batch(
        model,
        [input_grid],
        [instrument],
        spec,
        cfg,
        num_frames=num_frames,
        prompts=None if prompt is None else [prompt],
        seeds=[np.random.SeedSequence(cfg.seed)],
    )
    return GenResult(grid=res.grids[0], chunk_rows=res.chunk_rows,
                     chunk_seconds=res.chunk_seconds)


# ---------------------------------------------------------------------------
# masked decoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlmDecodeConfig:
    noise_temps: tuple = (8.0, 8.0, 4.0, 4.0)
    steps: tuple = (128, 64, 32, 32)
    cfg_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if len(self.noise_temps) != len(self.steps):
            raise DecodeError("need one noise temperature per level step count")
        if any(s < 1 for s in self.steps):
            raise DecodeError("step counts must be >= 1")
        if any(t < 0 for t in self.noise_temps):
            raise DecodeError("noise temperatures must be >= 0")
        if not math.isfinite(self.cfg_scale):
            raise DecodeError("cfg_scale must be finite")


def unmask_schedule(n_masked: int, steps: int) -> list:
    """Remaining-mask counts after each iteration: strictly decreasing to 0."""
    if n_masked < 1:
        return []
    s = min(steps, n_masked)
    left = []
    prev = n_masked
    for i in range(s):
        want = math.floor(n_masked * math.cos(math.pi / 2 * (i + 1) / s))
        nxt = min(prev - 1, want)
        nxt = max(nxt, 0)
        left.append(nxt)
        prev = nxt
    left[-1] = 0
    return left


def noise_schedule(max_temp: float, steps: int) -> list:
    """Linear anneal from max_temp to exactly 0 at the final iteration."""
    if steps == 1:
        return [0.0]
    return [max_temp * (1.0 - i / (steps - 1)) for i in range(steps)]


def guided_logits(cond, uncond, scale: float):
    if scale == 1.0:
        return cond
    return [u + scale * (c - u) for c, u in zip(cond, uncond)]


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def mlm_generate(
    model: Model,
    input_grid: TokenGrid,
    instrument: int,
    mcfg: MlmDecodeConfig,
    num_frames=None,
    prompt=None,
) -> TokenGrid:
    """Level-by-level iterative unmasking with confidence ranking.

    Coarser levels are fully committed before finer ones begin.  Each
    iteration samples every still-masked entry of the active level, ranks
    candidates by log-probability plus annealed Gumbel noise, commits the
    top of the ranking per the cosine schedule, and re-masks the rest.
    """
    cfgm = model.config
    if cfgm.causal:
        raise DecodeError("masked decoding needs a full-attention model")
    if len(mcfg.steps) != cfgm.n_q:
        raise DecodeError(f"need {cfgm.n_q} per-level step counts, got {len(mcfg.steps)}")
    spec = StreamSpec(0, 1)
    frames = _check_inputs(
        model, [input_grid], [instrument], spec, num_frames,
        None if prompt is None else [prompt],
    )
    n_q, vocab = cfgm.n_q, cfgm.vocab
    lay = Layout(0, n_q, frames)
    rows = lay.delayed_rows
    mask = mask_code(vocab)
    rng = np.random.default_rng(np.random.SeedSequence(mcfg.seed))

    forced = _forced_table(frames, n_q, vocab, prompt)
    oc = np.where(forced != FREE, forced, mask)
    oc = np.concatenate([np.full((1, n_q), -1, dtype=np.int64), oc])  # instrument slot
    ic = input_side(lay, input_grid)
    inst = np.asarray([instrument], dtype=np.int64)

    def logits_for(codes):
        batch = {
            "input_codes": ic[None],
            "output_codes": codes[None],
            "instrument": inst,
        }
        cond = model.forward_logits(batch)
        if mcfg.cfg_scale == 1.0:
            return guided_logits(cond, None, 1.0)
        batch_u = dict(batch, input_drop=np.array([True]))
        uncond = model.forward_logits(batch_u)
        return guided_logits(cond, uncond, mcfg.cfg_scale)

    for level in range(n_q):
        masked = np.flatnonzero(oc[1:, level] == mask) + 1  # sequence positions
        if masked.size == 0:
            continue
        left = unmask_schedule(masked.size, mcfg.steps[level])
        temps = noise_schedule(mcfg.noise_temps[level], len(left))
        for n_left, temp in zip(left, temps):
            logits = logits_for(oc)[level][0, masked, :vocab]
            logp = _log_softmax(logits)
            toks = np.array(
                [np.argmax(row + rng.gumbel(size=vocab)) for row in logp]
            )
            conf = logp[np.arange(masked.size), toks]
            if temp > 0:
                conf = conf + temp * rng.gumbel(size=masked.size)
            n_commit = masked.size - n_left
            order = np.argsort(-conf, kind="stable")[:n_commit]
            oc[masked[order], level] = toks[order]
            keepers = np.ones(masked.size, dtype=bool)
            keepers[order] = False
            masked = masked[keepers]
        assert masked.size == 0

    codes = oc[1:]
    sent_model = sentinel_code(vocab)
    codes = np.where(codes == sent_model, vocab, codes)
    return undo_delay(DelayedGrid(codes.astype(np.int32), vocab))

"""Synthetic multi-track corpus with known latent structure.

Each song draws a chord track (first-order Markov chain over C chords, per-frame
switch probability p), a beat grid (accent every P frames, phase = absolute
frame index mod P), and N stems tagged with instrument categories. Level-1
tokens encode (chord, accent) directly: token = 2*chord + accent when voiced,
a reserved silence code 2C otherwise. Upper levels encode instrument texture:
a fixed seeded base table indexed by (level, chord, beat-phase bucket,
instrument) plus uniform jitter in {0..3}.

Silence comes from two two-state Markov chains: a song-wide shared rest chain
(all stems rest together) and an independent per-stem chain. Frames on the
beat (phase 0) are never silenced, so every stem states every beat onset.

The input mix of several stems is the elementwise min over voiced entries,
with silence as the identity of the reduction; since all voiced stems of a
song share the same level-1 token, the mix preserves (chord, accent) exactly
and is silent only where every mixed stem is silent.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .grids import TokenGrid, read_grid, write_grid

INSTRUMENTS = (
    "piano",
    "chromatic_percussion",
    "organ",
    "guitar",
    "bass",
    "strings",
    "ensemble",
    "brass",
    "reed",
    "pipe",
    "synth_lead",
    "synth_pad",
    "synth_fx",
    "ethnic",
    "percussive",
    "drums",
    "sound_fx",
    "vocal",
)
VOCAL = INSTRUMENTS.index("vocal")  # never a prediction target
N_PHASE_BUCKETS = 5
TEXTURE_JITTER = 4  # upper-level tokens are base + Uniform{0..3}


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_chords: int = 12
    switch_prob: float = 0.02
    beat_period: int = 25
    min_stems: int = 2
    max_stems: int = 6
    vocab: int = 64
    n_q: int = 4
    frames: int = 500
    # silence chains: per-frame enter/exit probabilities
    rest_enter: float = 1 / 120
    rest_exit: float = 1 / 30
    stem_silence_enter: float = 1 / 80
    stem_silence_exit: float = 1 / 25

    def __post_init__(self):
        c = self.n_chords
        if c < 2:
            raise CorpusError(f"need at least 2 chords, got {c}")
        # level-1 uses [0, 2C) plus silence code 2C; upper levels need
        # [2C+1, vocab-TEXTURE_JITTER] non-empty for the texture bases
        if self.vocab < 2 * c + 1 + TEXTURE_JITTER:
            raise CorpusError(f"vocab {self.vocab} too small for {c} chords")
        if not (1 <= self.min_stems <= self.max_stems <= len(INSTRUMENTS)):
            raise CorpusError(f"bad stem range [{self.min_stems}, {self.max_stems}]")
        if self.n_q < 1 or self.frames < 1 or self.beat_period < 2:
            raise CorpusError("n_q, frames, beat_period out of range")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise CorpusError(f"switch_prob {self.switch_prob} not a probability")

    @property
    def silence_code(self) -> int:
        return 2 * self.n_chords


@dataclass
class Song:
    stems: list  # list[TokenGrid], one per stem
    instruments: list  # instrument category per stem
    chord_track: np.ndarray  # (T,) int32
    beat_phase: np.ndarray  # (T,) int32, accent where 0
    silence: list  # list[(T,) bool], per stem

    @property
    def n_stems(self) -> int:
        return len(self.stems)

    @property
    def frames(self) -> int:
        return len(self.chord_track)


@dataclass
class ExamplePair:
    input_mix: TokenGrid
    target: TokenGrid
    target_instrument: int
    window_start: int
    target_stem: int = -1
    input_stems: tuple = ()


_texture_cache: dict = {}


def texture_table(cfg: SynthConfig) -> np.ndarray:
    """(n_q-1, C, buckets, instruments) base codes, fixed across corpora."""
    key = (cfg.n_q, cfg.n_chords, cfg.vocab)
    if key not in _texture_cache:
        rng = np.random.default_rng(np.random.SeedSequence([0x7EC7, *key]))
        lo = 2 * cfg.n_chords + 1
        hi = cfg.vocab - TEXTURE_JITTER + 1  # base + jitter stays < vocab
        shape = (max(cfg.n_q - 1, 1), cfg.n_chords, N_PHASE_BUCKETS, len(INSTRUMENTS))
        _texture_cache[key] = rng.integers(lo, hi, size=shape, dtype=np.int32)
    return _texture_cache[key]


def _two_state_chain(rng, t: int, p_enter: float, p_exit: float) -> np.ndarray:
    # chain starts in the off (voiced) state
    u = rng.random(t)
    out = np.zeros(t, dtype=bool)
    on = False
    for i in range(t):
        if on:
            if u[i] < p_exit:
                on = False
        else:
            if u[i] < p_enter:
                on = True
        out[i] = on
    return out


def generate_song(cfg: SynthConfig, seed) -> Song:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    t, c = cfg.frames, cfg.n_chords

    chord = np.empty(t, dtype=np.int32)
    chord[0] = rng.integers(0, c)
    switch = rng.random(t) < cfg.switch_prob
    hop = rng.integers(1, c, size=t)  # offset to a different chord, uniform
    for i in range(1, t):
        chord[i] = (chord[i - 1] + hop[i]) % c if switch[i] else chord[i - 1]

    phase = (np.arange(t) % cfg.beat_period).astype(np.int32)
    accent = phase == 0

    n_stems = int(rng.integers(cfg.min_stems, cfg.max_stems + 1))
    instruments = [int(m) for m in rng.choice(len(INSTRUMENTS), size=n_stems, replace=False)]

    shared_rest = _two_state_chain(rng, t, cfg.rest_enter, cfg.rest_exit)
    bucket = np.minimum(phase * N_PHASE_BUCKETS // cfg.beat_period, N_PHASE_BUCKETS - 1)
    table = texture_table(cfg)

    stems, silences = [], []
    level1 = (2 * chord + accent).astype(np.int32)
    for s in range(n_stems):
        own = _two_state_chain(rng, t, cfg.stem_silence_enter, cfg.stem_silence_exit)
        silent = (shared_rest | own) & ~accent  # beats are always voiced
        codes = np.empty((t, cfg.n_q), dtype=np.int32)
        codes[:, 0] = np.where(silent, cfg.silence_code, level1)
        for l in range(1, cfg.n_q):
            base = table[l - 1, chord, bucket, instruments[s]]
            tok = base + rng.integers(0, TEXTURE_JITTER, size=t, dtype=np.int32)
            codes[:, l] = np.where(silent, cfg.silence_code, tok)
        stems.append(TokenGrid(codes, cfg.vocab))
        silences.append(silent)

    return Song(stems, instruments, chord, phase, silences)


def mix_stems(stems, silence_code: int) -> TokenGrid:
    """Elementwise min with silence as the identity of the reduction."""
    if not stems:
        raise CorpusError("cannot mix zero stems")
    vocab = stems[0].vocab
    big = np.int32(2**30)
    acc = None
    for g in stems:
        if g.vocab != vocab or g.codes.shape != stems[0].codes.shape:
            raise CorpusError("stems disagree on shape or vocab")
        lifted = np.where(g.codes == silence_code, big, g.codes)
        acc = lifted if acc is None else np.minimum(acc, lifted)
    return TokenGrid(np.where(acc == big, silence_code, acc), vocab)


def make_example(
    song: Song, cfg: SynthConfig, window: int, seed, max_attempts: int = 64
) -> ExamplePair:
    """Sample (input mix, target stem) over a window with enough voiced overlap."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    t = song.frames
    if window > t:
        raise CorpusError(f"window {window} longer than song ({t} frames)")
    if song.n_stems < 2:
        raise CorpusError("need at least 2 stems to form an example")

    eligible = [i for i, m in enumerate(song.instruments) if m != VOCAL]
    if not eligible:
        raise CorpusError("no non-vocal stem available as target")
    tgt = int(eligible[rng.integers(0, len(eligible))])
    others = [i for i in range(song.n_stems) if i != tgt]
    n_in = int(rng.integers(1, len(others) + 1))
    chosen = [others[i] for i in rng.choice(len(others), size=n_in, replace=False)]

    voiced = [~m for m in song.silence]
    for _ in range(max_attempts):
        start = int(rng.integers(0, t - window + 1))
        stop = start + window
        v_tgt = voiced[tgt][start:stop]
        v_in = np.zeros(window, dtype=bool)
        for s in chosen:
            v_in |= voiced[s][start:stop]
        both = int((v_tgt & v_in).sum())
        floor = min(int(v_tgt.sum()), int(v_in.sum()))
        if floor > 0 and both / floor >= 0.5:
            mix = mix_stems([song.stems[s].slice_frames(start, stop) for s in chosen], cfg.silence_code)
            return ExamplePair(
                input_mix=mix,
                target=song.stems[tgt].slice_frames(start, stop),
                target_instrument=song.instruments[tgt],
                window_start=start,
                target_stem=tgt,
                input_stems=tuple(sorted(chosen)),
            )
    raise CorpusError(f"no window with >=50% voiced overlap after {max_attempts} attempts")


@dataclass
class LatentView:
    chord: np.ndarray  # (T,) int32, -1 where not decodable
    accent: np.ndarray  # (T,) bool
    valid: np.ndarray  # (T,) bool, level-1 token decodes to a chord
    silent: np.ndarray  # (T,) bool, level-1 token is the silence code


def decode_latents(grid: TokenGrid, n_chords: int) -> LatentView:
    tok = grid.codes[:, 0]
    valid = tok < 2 * n_chords
    chord = np.where(valid, tok // 2, -1).astype(np.int32)
    accent = valid & (tok % 2 == 1)
    silent = tok == 2 * n_chords
    return LatentView(chord=chord, accent=accent, valid=valid, silent=silent)


# ---------------------------------------------------------------------------
# corpus directory I/O
# ---------------------------------------------------------------------------

@dataclass
class Corpus:
    config: SynthConfig
    songs: list  # list[Song]
    splits: dict  # name -> list of song indices
    seed: int

    def split_songs(self, name: str):
        return [self.songs[i] for i in self.splits[name]]


def split_indices(n_songs: int, rng) -> dict:
    if n_songs < 3:
        raise CorpusError(f"need >= 3 songs to split, got {n_songs}")
    order = [int(i) for i in rng.permutation(n_songs)]
    n_valid = max(1, round(0.05 * n_songs))
    n_test = max(1, round(0.05 * n_songs))
    n_train = n_songs - n_valid - n_test
    return {
        "train": sorted(order[:n_train]),
        "valid": sorted(order[n_train : n_train + n_valid]),
        "test": sorted(order[n_train + n_valid :]),
    }


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def write_corpus(out_dir, cfg: SynthConfig, n_songs: int, seed: int) -> Corpus:
    out = Path(out_dir)
    (out / "songs").mkdir(parents=True, exist_ok=True)
    (out / "stems").mkdir(parents=True, exist_ok=True)

    root = np.random.SeedSequence(seed)
    song_seeds = root.spawn(n_songs)
    split_rng = np.random.default_rng(root.spawn(1)[0])

    songs = []
    for i, ss in enumerate(song_seeds):
        song = generate_song(cfg, ss)
        stem_paths = []
        for s, stem in enumerate(song.stems):
            rel = f"stems/song_{i:05d}_s{s}.tgrd"
            write_grid(out / rel, stem)
            stem_paths.append(rel)
        _dump_json(
            out / "songs" / f"song_{i:05d}.json",
            {
                "instruments": song.instruments,
                "chord_track": song.chord_track.tolist(),
                "beat_phase": song.beat_phase.tolist(),
                "silence": [m.astype(int).tolist() for m in song.silence],
                "stems": stem_paths,
            },
        )
        songs.append(song)

    splits = split_indices(n_songs, split_rng)
    _dump_json(
        out / "manifest.json",
        {
            "version": 1,
            "seed": seed,
            "n_songs": n_songs,
            "config": asdict(cfg),
            "splits": splits,
            "songs": [f"songs/song_{i:05d}.json" for i in range(n_songs)],
        },
    )
    return Corpus(config=cfg, songs=songs, splits=splits, seed=seed)


def load_corpus(dir_path) -> Corpus:
    root = Path(dir_path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise CorpusError(f"{root}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != 1:
        raise CorpusError(f"{root}: unsupported corpus version {manifest.get('version')}")
    known = set(SynthConfig.__dataclass_fields__)
    extra = set(manifest["config"]) - known
    if extra:
        raise CorpusError(f"{root}: unknown config keys {sorted(extra)}")
    cfg = SynthConfig(**manifest["config"])

    songs = []
    for rel in manifest["songs"]:
        meta = json.loads((root / rel).read_text())
        stems = [read_grid(root / p) for p in meta["stems"]]
        songs.append(
            Song(
                stems=stems,
                instruments=list(meta["instruments"]),
                chord_track=np.asarray(meta["chord_track"], dtype=np.int32),
                beat_phase=np.asarray(meta["beat_phase"], dtype=np.int32),
                silence=[np.asarray(m, dtype=bool) for m in meta["silence"]],
            )
        )
    return Corpus(config=cfg, songs=songs, splits=manifest["splits"], seed=manifest["seed"])


def sample_pairs(corpus: Corpus, split: str, n: int, window: int, seed: int):
    """Deterministic (song_index, ExamplePair) stream from one split."""
    ids = corpus.splits[split]
    if not ids:
        raise CorpusError(f"split {split!r} is empty")
    out = []
    children = np.random.SeedSequence(seed).spawn(n)
    for ss in children:
        rng = np.random.default_rng(ss)
        for _ in range(100):
            song_id = ids[int(rng.integers(0, len(ids)))]
            try:
                pair = make_example(corpus.songs[song_id], corpus.config, window, ss.spawn(1)[0])
            except CorpusError:
                continue
            out.append((song_id, pair))
            break
        else:
            raise CorpusError(f"could not sample an example from split {split!r}")
    return out

import json

import numpy as np
import pytest

from streamjam.grids import TokenGrid
from streamjam.synth import (
    VOCAL,
    Corpus,
    CorpusError,
    ExamplePair,
    SynthConfig,
    decode_latents,
    generate_song,
    load_corpus,
    make_example,
    mix_stems,
    sample_pairs,
    split_indices,
    texture_table,
    write_corpus,
)


def songs_equal(a, b):
    return (
        a.instruments == b.instruments
        and np.array_equal(a.chord_track, b.chord_track)
        and np.array_equal(a.beat_phase, b.beat_phase)
        and all(np.array_equal(x, y) for x, y in zip(a.silence, b.silence))
        and all(x == y for x, y in zip(a.stems, b.stems))
    )


def test_song_determinism():
    cfg = SynthConfig()
    assert songs_equal(generate_song(cfg, 7), generate_song(cfg, 7))
    assert not songs_equal(generate_song(cfg, 7), generate_song(cfg, 8))


def test_chord_markov_statistics():
    cfg = SynthConfig(frames=40000, switch_prob=0.02)
    song = generate_song(cfg, 123)
    ch = song.chord_track
    switches = (ch[1:] != ch[:-1]).mean()
    assert abs(switches - 0.02) < 0.004
    counts = np.bincount(ch, minlength=cfg.n_chords) / len(ch)
    assert counts.max() < 3.0 / cfg.n_chords  # roughly uniform marginal


def test_beat_grid_and_voicing():
    cfg = SynthConfig()
    song = generate_song(cfg, 5)
    assert np.array_equal(song.beat_phase, np.arange(cfg.frames) % cfg.beat_period)
    accents = song.beat_phase == 0
    for stem, silent in zip(song.stems, song.silence):
        assert not (silent & accents).any()  # beats always voiced
        lat = decode_latents(stem, cfg.n_chords)
        v = ~silent
        assert np.array_equal(lat.chord[v], song.chord_track[v])
        assert np.array_equal(lat.accent[v], accents[v])
        assert np.array_equal(lat.silent, silent)
        # upper levels sit above the silence code when voiced
        assert stem.codes[v, 1:].min() > cfg.silence_code


def test_stem_counts_and_instruments():
    cfg = SynthConfig()
    seen = set()
    for seed in range(40):
        song = generate_song(cfg, seed)
        assert cfg.min_stems <= song.n_stems <= cfg.max_stems
        assert len(set(song.instruments)) == song.n_stems
        seen.update(song.instruments)
    assert len(seen) > 10  # instrument variety across songs


def test_mix_preserves_level1_and_is_commutative():
    cfg = SynthConfig()
    song = generate_song(cfg, 11)
    stems = song.stems
    mix = mix_stems(stems, cfg.silence_code)
    all_silent = np.all(np.stack(song.silence), axis=0)
    lat = decode_latents(mix, cfg.n_chords)
    assert np.array_equal(lat.silent, all_silent)
    v = ~all_silent
    assert np.array_equal(lat.chord[v], song.chord_track[v])
    assert mix_stems(stems[::-1], cfg.silence_code) == mix
    a, b, c = stems[0], stems[1], stems[-1]
    left = mix_stems([mix_stems([a, b], cfg.silence_code), c], cfg.silence_code)
    right = mix_stems([a, mix_stems([b, c], cfg.silence_code)], cfg.silence_code)
    assert left == right


def test_mix_silence_fraction_is_useful():
    # shared rests must make the mix go silent often enough to hide chord
    # switches from a t_f=0 model; sanity-band the fraction
    cfg = SynthConfig(frames=2000)
    fracs = []
    for seed in range(30):
        song = generate_song(cfg, seed)
        others = list(range(1, song.n_stems))
        mix = mix_stems([song.stems[i] for i in others], cfg.silence_code)
        fracs.append(decode_latents(mix, cfg.n_chords).silent.mean())
    assert 0.08 < float(np.mean(fracs)) < 0.45


def test_texture_table_fixed_and_in_range():
    cfg = SynthConfig()
    t1 = texture_table(cfg)
    t2 = texture_table(SynthConfig(frames=100))
    assert np.array_equal(t1, t2)
    assert t1.min() >= 2 * cfg.n_chords + 1
    assert t1.max() + 3 < cfg.vocab


def test_make_example_contract():
    cfg = SynthConfig()
    song = generate_song(cfg, 3)
    pair = make_example(song, cfg, window=300, seed=0)
    assert isinstance(pair, ExamplePair)
    assert pair.target_instrument != VOCAL
    assert pair.input_mix.frames == pair.target.frames == 300
    assert 0 <= pair.window_start <= cfg.frames - 300
    assert 1 <= len(pair.input_stems) <= song.n_stems - 1
    assert pair.target_stem not in pair.input_stems
    lo, hi = pair.window_start, pair.window_start + 300
    expect = mix_stems(
        [song.stems[s].slice_frames(lo, hi) for s in pair.input_stems], cfg.silence_code
    )
    # mix_stems is order-insensitive so sorted indices reproduce it
    assert pair.input_mix == expect
    assert pair.target == song.stems[pair.target_stem].slice_frames(lo, hi)
    # overlap filter
    v_t = ~song.silence[pair.target_stem][lo:hi]
    v_i = np.zeros(300, dtype=bool)
    for s in pair.input_stems:
        v_i |= ~song.silence[s][lo:hi]
    assert (v_t & v_i).sum() / min(v_t.sum(), v_i.sum()) >= 0.5


def test_make_example_determinism_and_errors():
    cfg = SynthConfig()
    song = generate_song(cfg, 3)
    a = make_example(song, cfg, window=250, seed=9)
    b = make_example(song, cfg, window=250, seed=9)
    assert a.input_mix == b.input_mix and a.target == b.target
    assert a.window_start == b.window_start
    with pytest.raises(CorpusError):
        make_example(song, cfg, window=cfg.frames + 1, seed=0)


def test_make_example_raises_when_overlap_impossible():
    cfg = SynthConfig(frames=200)
    song = generate_song(cfg, 3)
    # silence the target completely except beats? force zero overlap instead:
    song.silence[0][:] = True
    song.silence[0][song.beat_phase == 0] = True  # still "silent" for the filter
    stems0 = song.stems[0].codes.copy()
    stems0[:, :] = cfg.silence_code
    song.stems[0] = TokenGrid(stems0, cfg.vocab)
    for s in range(1, song.n_stems):
        song.silence[s][:] = True
    with pytest.raises(CorpusError):
        make_example(song, cfg, window=100, seed=0)


def test_split_indices():
    rng = np.random.default_rng(0)
    sp = split_indices(200, rng)
    assert len(sp["train"]) == 180 and len(sp["valid"]) == 10 and len(sp["test"]) == 10
    allidx = sorted(sp["train"] + sp["valid"] + sp["test"])
    assert allidx == list(range(200))
    with pytest.raises(CorpusError):
        split_indices(2, rng)


def test_corpus_round_trip(tmp_path):
    cfg = SynthConfig(frames=120)
    c1 = write_corpus(tmp_path / "c", cfg, n_songs=6, seed=42)
    c2 = load_corpus(tmp_path / "c")
    assert isinstance(c2, Corpus)
    assert c2.config == cfg and c2.seed == 42
    assert c2.splits == c1.splits
    assert len(c2.songs) == 6
    for a, b in zip(c1.songs, c2.songs):
        assert songs_equal(a, b)
    # deterministic bytes on rewrite
    write_corpus(tmp_path / "d", cfg, n_songs=6, seed=42)
    for rel in ["manifest.json", "songs/song_00000.json", "stems/song_00000_s0.tgrd"]:
        assert (tmp_path / "c" / rel).read_bytes() == (tmp_path / "d" / rel).read_bytes()


def test_load_corpus_rejects_unknown_config(tmp_path):
    cfg = SynthConfig(frames=60)
    write_corpus(tmp_path / "c", cfg, n_songs=3, seed=0)
    m = json.loads((tmp_path / "c" / "manifest.json").read_text())
    m["config"]["mystery_knob"] = 3
    (tmp_path / "c" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "c")


def test_sample_pairs_deterministic(tmp_path):
    cfg = SynthConfig(frames=200)
    corpus = write_corpus(tmp_path / "c", cfg, n_songs=8, seed=1)
    a = sample_pairs(corpus, "train", 12, window=150, seed=5)
    b = sample_pairs(corpus, "train", 12, window=150, seed=5)
    assert [i for i, _ in a] == [i for i, _ in b]
    assert all(x.input_mix == y.input_mix for (_, x), (_, y) in zip(a, b))
    ids = set(corpus.splits["train"])
    assert all(i in ids for i, _ in a)


def test_config_validation():
    with pytest.raises(CorpusError):
        SynthConfig(vocab=24)  # no room for silence + texture
    with pytest.raises(CorpusError):
        SynthConfig(min_stems=0)
    with pytest.raises(CorpusError):
        SynthConfig(switch_prob=1.5)

"""Estimator facade: sklearn conventions plus the fit/predict/score path."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from streamjam.estimator import StreamingAccompanist
from streamjam.grids import TokenGrid
from streamjam.synth import Corpus, SynthConfig, generate_song, split_indices


@pytest.fixture(scope="module")
def corpus():
    cfg = SynthConfig(frames=200, min_stems=2, max_stems=3, n_q=2)
    songs = [generate_song(cfg, seed) for seed in range(6)]
    return Corpus(
        config=cfg,
        songs=songs,
        splits=split_indices(6, np.random.default_rng(0)),
        seed=0,
    )


@pytest.fixture(scope="module")
def fitted(corpus):
    est = StreamingAccompanist(
        t_f=-2, k=2, d_model=16, n_layers=1, n_heads=2, n_kv_heads=2, d_dac=8,
        ffn_mult=2, total_steps=6, warmup_steps=2, batch_size=2,
        window_frames=48, top_k=1, seed=0,
    )
    return est.fit(corpus)


def test_params_round_trip():
    est = StreamingAccompanist(t_f=-10, k=5, peak_lr=3e-4)
    params = est.get_params()
    assert params["t_f"] == -10 and params["k"] == 5 and params["peak_lr"] == 3e-4
    twin = StreamingAccompanist(**params)
    assert twin.get_params() == params
    cloned = clone(est)
    assert cloned.get_params() == params


def test_set_params():
    est = StreamingAccompanist()
    est.set_params(t_f=4, temperature=0.7)
    assert est.t_f == 4 and est.temperature == 0.7
    with pytest.raises(ValueError):
        est.set_params(nonsense=1)


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        StreamingAccompanist().predict(TokenGrid(np.zeros((8, 2), dtype=np.int32), 64))


def test_fit_predict_shapes(fitted, corpus):
    song = corpus.songs[corpus.splits["test"][0]]
    mix = song.stems[0].slice_frames(0, 48)
    out = fitted.predict(mix)
    assert isinstance(out, TokenGrid)
    assert out.frames == 48 and out.n_q == 2 and out.vocab == corpus.config.vocab
    outs = fitted.predict([(mix, 3), (mix, 5)])
    assert isinstance(outs, list) and len(outs) == 2
    assert all(g.frames == 48 for g in outs)


def test_predict_is_deterministic(fitted, corpus):
    song = corpus.songs[corpus.splits["test"][0]]
    mix = song.stems[0].slice_frames(0, 48)
    a = fitted.predict(mix)
    b = fitted.predict(mix)
    assert np.array_equal(a.codes, b.codes)


def test_predict_input_validation(fitted):
    with pytest.raises(TypeError):
        fitted.predict(np.zeros((8, 2)))
    with pytest.raises(ValueError):
        fitted.predict([])
    grid = TokenGrid(np.zeros((8, 2), dtype=np.int32), 64)
    with pytest.raises(ValueError):
        fitted.predict((grid, 99))


def test_fit_validates_corpus():
    with pytest.raises(TypeError):
        StreamingAccompanist().fit([1, 2, 3])


def test_score_range(fitted, corpus):
    s = fitted.score(corpus, n_examples=3)
    assert 0.0 <= s <= 1.0

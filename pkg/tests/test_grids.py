import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamjam.grids import (
    DelayedGrid,
    GridError,
    TokenGrid,
    apply_delay,
    delay_latency_frames,
    delay_latency_seconds,
    frames_to_seconds,
    read_grid,
    seconds_to_frames,
    sentinel_mask,
    undo_delay,
    write_grid,
)


def test_delay_hand_unrolled():
    # worked out by hand: T=3, n_q=3, vocab=5, sentinel therefore 5
    g = TokenGrid(np.array([[1, 2, 3], [4, 0, 1], [2, 3, 4]]), vocab=5)
    d = apply_delay(g)
    expect = np.array(
        [
            [1, 5, 5],
            [4, 2, 5],
            [2, 0, 3],
            [5, 3, 1],
            [5, 5, 4],
        ]
    )
    assert np.array_equal(d.codes, expect)
    assert d.sentinel == 5
    assert undo_delay(d) == g


def test_delay_line_counts():
    g = TokenGrid(np.zeros((10, 4), dtype=int), vocab=3)
    d = apply_delay(g)
    assert d.rows == 10 + 3
    assert int((d.codes == d.sentinel).sum()) == 4 * 3  # n_q * (n_q - 1)


@st.composite
def grids(draw):
    t = draw(st.integers(min_value=0, max_value=64))
    n_q = draw(st.integers(min_value=1, max_value=8))
    vocab = draw(st.integers(min_value=2, max_value=32))
    codes = draw(
        st.lists(
            st.lists(st.integers(min_value=0, max_value=vocab - 1), min_size=n_q, max_size=n_q),
            min_size=t,
            max_size=t,
        )
    )
    return TokenGrid(np.array(codes, dtype=np.int64).reshape(t, n_q), vocab)


@given(grids())
@settings(max_examples=200)
def test_delay_round_trip_property(g):
    d = apply_delay(g)
    assert d.rows == g.frames + g.n_q - 1
    assert int((d.codes == d.sentinel).sum()) == g.n_q * (g.n_q - 1)
    for l in range(g.n_q):
        assert np.array_equal(d.codes[l : l + g.frames, l], g.codes[:, l])
    assert undo_delay(d) == g


def test_undo_delay_validates_sentinels():
    g = TokenGrid(np.ones((6, 3), dtype=int), vocab=4)
    d = apply_delay(g)
    # sentinel where data should be
    bad = d.codes.copy()
    bad[3, 0] = 4
    with pytest.raises(GridError):
        undo_delay(DelayedGrid(bad, 4))
    # data where a sentinel should be
    bad = d.codes.copy()
    bad[0, 2] = 1
    with pytest.raises(GridError):
        undo_delay(DelayedGrid(bad, 4))


def test_sentinel_mask_shape():
    m = sentinel_mask(5, 4)
    assert m.shape == (8, 4)
    assert m[:, 0].sum() == 3 and m[:, 3].sum() == 3


def test_grid_validation():
    with pytest.raises(GridError):
        TokenGrid(np.array([[0, 5]]), vocab=5)  # code == vocab not allowed in source
    with pytest.raises(GridError):
        TokenGrid(np.array([0, 1]), vocab=5)  # 1-D
    with pytest.raises(GridError):
        TokenGrid(np.array([[0.5]]), vocab=5)  # not integer
    DelayedGrid(np.array([[5]]), vocab=5)  # sentinel allowed in delayed


def test_slice_frames():
    g = TokenGrid(np.arange(12).reshape(6, 2) % 7, vocab=7)
    s = g.slice_frames(2, 5)
    assert s.frames == 3
    assert np.array_equal(s.codes, g.codes[2:5])
    with pytest.raises(GridError):
        g.slice_frames(2, 9)


def test_time_conversions():
    assert seconds_to_frames(0.2) == 10
    assert seconds_to_frames(1) == 50
    assert seconds_to_frames(-1.0) == -50
    assert frames_to_seconds(25) == 0.5
    with pytest.raises(GridError):
        seconds_to_frames(0.015)  # 0.75 frames
    assert delay_latency_frames(4) == 3
    assert delay_latency_seconds(4) == pytest.approx(0.06)


def test_grid_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    g = TokenGrid(rng.integers(0, 64, size=(37, 4)), vocab=64)
    p = tmp_path / "a.tgrd"
    write_grid(p, g)
    assert read_grid(p) == g
    # byte-deterministic
    p2 = tmp_path / "b.tgrd"
    write_grid(p2, g)
    assert p.read_bytes() == p2.read_bytes()
    # header is magic + 4 u32 then u16 payload
    assert p.read_bytes()[:4] == b"TGRD"
    assert len(p.read_bytes()) == 20 + 37 * 4 * 2


def test_grid_file_errors(tmp_path):
    g = TokenGrid(np.zeros((4, 2), dtype=int), vocab=8)
    p = tmp_path / "a.tgrd"
    write_grid(p, g)
    raw = p.read_bytes()
    (tmp_path / "magic.tgrd").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(GridError):
        read_grid(tmp_path / "magic.tgrd")
    (tmp_path / "trunc.tgrd").write_bytes(raw[:-2])
    with pytest.raises(GridError):
        read_grid(tmp_path / "trunc.tgrd")
    (tmp_path / "ver.tgrd").write_bytes(raw[:4] + b"\x09\x00\x00\x00" + raw[8:])
    with pytest.raises(GridError):
        read_grid(tmp_path / "ver.tgrd")
    bad = bytearray(raw)
    bad[20] = 0xFF  # code 255 >= vocab 8
    (tmp_path / "range.tgrd").write_bytes(bytes(bad))
    with pytest.raises(GridError):
        read_grid(tmp_path / "range.tgrd")


def test_empty_grid_round_trip(tmp_path):
    g = TokenGrid(np.zeros((0, 4), dtype=int), vocab=16)
    d = apply_delay(g)
    assert d.rows == 3 and bool((d.codes == 16).all())
    assert undo_delay(d) == g
    p = tmp_path / "e.tgrd"
    write_grid(p, g)
    assert read_grid(p) == g

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sgfuse.autodiff import ShapeError
from sgfuse.grid import (Provenance, TokenGrid, flatten_tokens, read_grid, read_matrix_csv,
                         resample_geometry, spatial_merge, unflatten_tokens, write_channel_csv,
                         write_grid, write_matrix_csv)
from sgfuse.oracle import naive_bilinear

seeds = st.integers(0, 2**32 - 1)


def grid_of(values, prov=Provenance.SEMANTIC):
    return TokenGrid(np.asarray(values, dtype=float), prov)


# ---------------------------------------------------------------- TokenGrid


def test_grid_rejects_bad_shapes_and_values():
    with pytest.raises(ShapeError):
        TokenGrid(np.ones((2, 2, 2)))
    with pytest.raises(ShapeError):
        TokenGrid(np.ones((1, 0, 2, 2)))
    with pytest.raises(ValueError):
        TokenGrid(np.full((1, 1, 1, 1), np.nan))


def test_grid_derived_token_count():
    g = TokenGrid(np.zeros((2, 3, 5, 4)))
    assert (g.n, g.height, g.width, g.channels, g.tokens_per_frame) == (2, 3, 5, 4, 15)


# ---------------------------------------------------------------- merge


def test_merge_identity(rng):
    g = grid_of(rng.normal(size=(2, 3, 5, 2)))
    np.testing.assert_array_equal(spatial_merge(g, 1).values, g.values)


def test_merge_block_mean():
    g = grid_of(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
    assert spatial_merge(g, 2).values.reshape(-1).tolist() == [2.5]


def test_merge_constant_field():
    out = spatial_merge(grid_of(np.full((2, 8, 4, 3), 7.0)), 2)
    assert out.values.shape == (2, 4, 2, 3)
    assert np.all(out.values == 7.0)


def test_merge_non_divisible():
    g = grid_of(np.arange(9.0).reshape(1, 3, 3, 1))
    with pytest.raises(ShapeError):
        spatial_merge(g, 2)
    padded = spatial_merge(g, 2, pad=True).values[0, :, :, 0]
    # bottom/right edges replicated: [[0,1,2,2],[3,4,5,5],[6,7,8,8],[6,7,8,8]]
    np.testing.assert_allclose(padded, [[2.0, 3.5], [6.5, 8.0]])


def test_merge_rejects_unsupported_size():
    with pytest.raises(ValueError):
        spatial_merge(grid_of(np.ones((1, 3, 3, 1))), 3)


@given(seeds, st.sampled_from([2, 4]), st.integers(1, 3), st.integers(1, 3))
def test_merge_then_nearest_upsample_recovers_block_constant(seed, m, bh, bw):
    coarse = np.random.default_rng(seed).normal(size=(2, bh, bw, 3))
    fine = coarse.repeat(m, axis=1).repeat(m, axis=2)
    merged = spatial_merge(grid_of(fine), m).values
    np.testing.assert_array_equal(merged.repeat(m, axis=1).repeat(m, axis=2), fine)


# ---------------------------------------------------------------- resample


def test_resample_identity(rng):
    g = grid_of(rng.normal(size=(2, 3, 4, 2)), Provenance.GEOMETRY)
    np.testing.assert_allclose(resample_geometry(g, 3, 4).values, g.values, rtol=0, atol=1e-12)


def test_resample_two_by_two_to_one():
    g = grid_of(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
    assert resample_geometry(g, 1, 1).values.reshape(-1).tolist() == [2.5]
    assert naive_bilinear([[[[1.0], [2.0]], [[3.0], [4.0]]]], 1, 1) == [[[[2.5]]]]


@given(st.floats(-1e3, 1e3), st.integers(1, 6), st.integers(1, 6), st.integers(1, 9), st.integers(1, 9))
def test_resample_constant_exact(value, sh, sw, th, tw):
    g = grid_of(np.full((1, sh, sw, 2), value))
    assert np.all(resample_geometry(g, th, tw).values == value)


@given(seeds, st.integers(1, 6), st.integers(1, 6), st.integers(1, 9), st.integers(1, 9))
def test_resample_is_convex(seed, sh, sw, th, tw):
    v = np.random.default_rng(seed).uniform(-10, 10, (2, sh, sw, 3))
    out = resample_geometry(grid_of(v), th, tw).values
    lo = v.min(axis=(1, 2), keepdims=True)
    hi = v.max(axis=(1, 2), keepdims=True)
    assert np.all(out >= lo) and np.all(out <= hi)


@given(seeds, st.integers(1, 5), st.integers(1, 5), st.integers(1, 7), st.integers(1, 7))
def test_resample_matches_naive(seed, sh, sw, th, tw):
    v = np.random.default_rng(seed).normal(size=(2, sh, sw, 2))
    got = resample_geometry(grid_of(v), th, tw).values
    np.testing.assert_allclose(got, np.array(naive_bilinear(v.tolist(), th, tw)), rtol=0, atol=1e-12)


def test_resample_rejects_empty_target():
    with pytest.raises(ShapeError):
        resample_geometry(grid_of(np.ones((1, 2, 2, 1))), 0, 2)


# ---------------------------------------------------------------- flatten


@given(seeds, st.integers(1, 3), st.integers(1, 5), st.integers(1, 7), st.integers(1, 4))
def test_flatten_round_trip(seed, n, h, w, c):
    g = grid_of(np.random.default_rng(seed).normal(size=(n, h, w, c)))
    back = unflatten_tokens(flatten_tokens(g), n, h, w)
    np.testing.assert_array_equal(back.values, g.values)


def test_flatten_index_layout():
    n, h, w = 2, 2, 2
    values = np.zeros((n, h, w, 1))
    counter = 0
    for i in range(n):
        for r in range(h):
            for col in range(w):
                values[i, r, col, 0] = counter
                counter += 1
    flat = flatten_tokens(grid_of(values))
    for i in range(n):
        for r in range(h):
            for col in range(w):
                assert flat[i * h * w + r * w + col, 0] == values[i, r, col, 0]
    # frame 1 occupies rows [L, 2L)
    np.testing.assert_array_equal(flat[4:8, 0], [4, 5, 6, 7])


def test_unflatten_count_mismatch():
    with pytest.raises(ShapeError):
        unflatten_tokens(np.zeros((7, 2)), 2, 2, 2)


# ---------------------------------------------------------------- files


@given(seeds, st.sampled_from(list(Provenance)))
def test_binary_grid_round_trip(tmp_path_factory, seed, prov):
    path = tmp_path_factory.mktemp("grid") / "g.tgrd"
    g = TokenGrid(np.random.default_rng(seed).normal(size=(2, 3, 4, 5)), prov)
    write_grid(path, g)
    back = read_grid(path)
    assert back.provenance == prov
    assert back.values.tobytes() == g.values.tobytes()


def test_binary_grid_layout(tmp_path):
    path = tmp_path / "g.tgrd"
    write_grid(path, TokenGrid(np.arange(6.0).reshape(1, 1, 2, 3), Provenance.GEOMETRY))
    raw = path.read_bytes()
    assert raw[:4] == b"TGRD"
    assert len(raw) == 4 + 4 * 4 + 1 + 6 * 8
    assert raw[20] == 1
    assert np.frombuffer(raw[21:], "<f8").tolist() == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]


def test_binary_grid_rejects_corruption(tmp_path):
    path = tmp_path / "g.tgrd"
    write_grid(path, TokenGrid(np.ones((1, 1, 1, 2))))
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        read_grid(path)
    write_grid(path, TokenGrid(np.ones((1, 1, 1, 2))))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError):
        read_grid(path)


def test_csv_format(tmp_path, rng):
    m = rng.normal(size=(3, 2))
    path = tmp_path / "m.csv"
    write_matrix_csv(path, m)
    raw = path.read_bytes()
    assert raw.startswith(b"col0,col1\r\n")
    assert raw.count(b"\r\n") == 4
    np.testing.assert_array_equal(read_matrix_csv(path), m)


def test_channel_csv(tmp_path, rng):
    g = grid_of(rng.normal(size=(2, 2, 3, 4)))
    path = tmp_path / "c.csv"
    write_channel_csv(path, g, frame=1, channel=2)
    np.testing.assert_array_equal(read_matrix_csv(path), g.values[1, :, :, 2])

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from randcontrol.rng import (
    Channel,
    PathStreams,
    RngStream,
    TimeGrid,
    brownian_increments,
    sample_brownian,
    split_stream,
    threefry2x32,
)


# Published Threefry-2x32-20 known-answer vectors (Random123 kat_vectors).
KAT = [
    ((0x00000000, 0x00000000), (0x00000000, 0x00000000), (0x6B200159, 0x99BA4EFE)),
    ((0xFFFFFFFF, 0xFFFFFFFF), (0xFFFFFFFF, 0xFFFFFFFF), (0x1CB996FC, 0xBB002BE7)),
    ((0x13198A2E, 0x03707344), (0x243F6A88, 0x85A308D3), (0xC4923A9C, 0x483DF7A0)),
]


@pytest.mark.parametrize("key, ctr, expected", KAT)
def test_threefry_known_answers(key, ctr, expected):
    y0, y1 = threefry2x32(key, np.uint32(ctr[0]), np.uint32(ctr[1]))
    assert (int(y0), int(y1)) == expected


def test_threefry_matches_jax_reference():
    prng = pytest.importorskip("jax._src.prng")
    jnp = pytest.importorskip("jax.numpy")
    key = (0xDEADBEEF, 0x01234567)
    x0 = np.arange(64, dtype=np.uint32) * np.uint32(2654435761)
    x1 = np.arange(64, dtype=np.uint32) ^ np.uint32(0xA5A5A5A5)
    ref = prng.threefry_2x32(jnp.array(key, dtype=jnp.uint32), jnp.concatenate([jnp.array(x0), jnp.array(x1)]))
    ref = np.asarray(ref)
    y0, y1 = threefry2x32(key, x0, x1)
    assert np.array_equal(np.concatenate([y0, y1]), ref)


def test_replay_is_bit_identical():
    a = split_stream(7, 0).uniform(100)
    b = split_stream(7, 0).uniform(100)
    assert np.array_equal(a, b)


def test_distinct_paths_uncorrelated():
    n = 100_000
    u = split_stream(7, 0).uniform(n)
    v = split_stream(7, 1).uniform(n)
    r = np.corrcoef(u, v)[0, 1]
    assert abs(r) <= 3 / np.sqrt(n)


def test_seed_sensitivity():
    assert split_stream(7, 0).uniform(1)[0] != split_stream(8, 0).uniform(1)[0]


def test_channels_are_disjoint():
    s = split_stream(3, 5)
    assert not np.any(np.isin(s.uniform(1000, channel=Channel.BROWNIAN), s.uniform(1000, channel=Channel.POISSON_GAP)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), first=st.integers(0, 1000), n=st.integers(1, 20), start=st.integers(0, 50))
def test_block_streams_agree_with_single_streams(seed, first, n, start):
    block = PathStreams(seed, n, first).uniform_block(Channel.GENERIC, start, 3)
    for p in range(n):
        assert np.array_equal(block[p], RngStream(seed, first + p).uniform(3, start=start))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), idx=st.integers(0, 2**32 - 1))
def test_uniforms_open_interval(seed, idx):
    u = RngStream(seed, idx).uniform(256)
    assert np.all((u > 0) & (u < 1))


def test_seed_range_checked():
    with pytest.raises(ValueError):
        RngStream(-1, 0)
    with pytest.raises(ValueError):
        RngStream(2**64, 0)


def test_time_grid_points():
    g = TimeGrid(0.5, 1.5, 4)
    assert g.points[0] == 0.5 and g.points[-1] == 1.5
    assert np.allclose(np.diff(g.points), 0.25)
    assert g.step_containing(0.75) == 0  # steps are (t_i, t_{i+1}]
    assert g.step_containing(0.76) == 1


def test_empty_grid_rejected():
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 0)


def test_single_step_increment_mean():
    grid = TimeGrid(0.0, 1.0, 1)
    dw = brownian_increments(grid, 1, PathStreams(11, 100_000))[:, 0, 0]
    assert abs(dw.mean()) <= 3e-2
    assert abs(dw.var() - 1.0) <= 3 * np.sqrt(2 / 1e5)


def test_two_dimensional_components_independent():
    grid = TimeGrid(0.0, 1.0, 1)
    dw = brownian_increments(grid, 2, PathStreams(12, 100_000))[:, 0, :]
    prod = dw[:, 0] * dw[:, 1]
    assert abs(prod.mean()) <= 3 * prod.std() / np.sqrt(prod.size)


def test_terminal_variance_is_T():
    grid = TimeGrid(0.0, 2.0, 20)
    dw = brownian_increments(grid, 1, PathStreams(13, 100_000))
    wT = dw.sum(axis=1)[:, 0]
    se = np.sqrt(2.0) * 2.0 / np.sqrt(wT.size)  # SE of the sample variance of N(0, 2)
    assert abs(wT.var() - 2.0) <= 3 * se


def test_single_path_matches_ensemble():
    grid = TimeGrid(0.0, 1.0, 10)
    ens = brownian_increments(grid, 2, PathStreams(5, 4, first_index=3))
    one = sample_brownian(grid, 2, split_stream(5, 5))
    assert np.array_equal(ens[2], one.increments)
    assert one.values[0].tolist() == [0.0, 0.0]


def test_brownian_rejects_bad_dimension():
    with pytest.raises(ValueError):
        sample_brownian(TimeGrid(0.0, 1.0, 2), 0, split_stream(0, 0))

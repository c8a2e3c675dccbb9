"""Counter-based random streams, time grids and Brownian increments.

Every random number used by the package is a pure function of
``(master_seed, path_index, channel, counter)``.  The generator is the
Threefry-2x32 block cipher with 20 rounds, vectorized over numpy arrays, so a
whole ensemble of per-path streams can be advanced at once without any shared
mutable generator state.  Gaussians are obtained from uniforms by the inverse
normal CDF (``scipy.special.ndtri``), which is pinned for bit-exact replay.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

__all__ = [
    "Channel",
    "RngStream",
    "PathStreams",
    "TimeGrid",
    "BrownianPath",
    "threefry2x32",
    "split_stream",
    "sample_brownian",
    "brownian_increments",
]

_ROTATIONS = ((13, 15, 26, 6), (17, 29, 16, 24))
_INDEX_BITS = 26
_MAX_INDEX = 1 << _INDEX_BITS


class Channel:
    """Counter sub-spaces; each consumer of randomness owns one."""

    BROWNIAN = 0
    POISSON_GAP = 1
    POISSON_MARK = 2
    APPROX_GAP = 3
    APPROX_KERNEL = 4
    EXTRA_GAP = 5
    EXTRA_MARK = 6
    GENERIC = 15


def threefry2x32(key, x0, x1):
    """Threefry-2x32-20 block function.

    Parameters
    ----------
    key : tuple of two ints
        The 64-bit key as two 32-bit words.
    x0, x1 : array_like of uint32
        Counter words; broadcast against each other.

    Returns
    -------
    (y0, y1) : tuple of uint32 arrays
    """
    k0 = int(key[0]) & 0xFFFFFFFF
    k1 = int(key[1]) & 0xFFFFFFFF
    ks = (k0, k1, k0 ^ k1 ^ 0x1BD11BDA)
    x0, x1 = np.broadcast_arrays(np.asarray(x0, dtype=np.uint32), np.asarray(x1, dtype=np.uint32))
    with np.errstate(over="ignore"):  # modular arithmetic is intended
        return _rounds(ks, x0, x1)


def _rounds(ks, x0, x1):
    x0 = x0 + np.uint32(ks[0])
    x1 = x1 + np.uint32(ks[1])
    tmp = np.empty_like(x1)
    for block in range(5):
        for r in _ROTATIONS[block % 2]:
            x0 += x1
            np.left_shift(x1, np.uint32(r), out=tmp)
            x1 >>= np.uint32(32 - r)
            x1 |= tmp
            x1 ^= x0
        i = block + 1
        x0 += np.uint32(ks[i % 3])
        x1 += np.uint32((ks[(i + 1) % 3] + i) & 0xFFFFFFFF)
    return x0, x1


def _split_seed(master_seed):
    seed = int(master_seed)
    if seed < 0 or seed >= 1 << 64:
        raise ValueError(f"master_seed must be an unsigned 64-bit integer, got {master_seed}")
    return seed & 0xFFFFFFFF, seed >> 32


def _to_unit(y0, y1):
    # 53 random bits, mapped to the open interval (0, 1)
    hi = (y0 >> np.uint32(5)).astype(np.float64)
    lo = (y1 >> np.uint32(6)).astype(np.float64)
    return (hi * 67108864.0 + lo + 0.5) / 9007199254740992.0


def _uniforms(key, path_index, channel, index):
    index = np.asarray(index, dtype=np.int64)
    if np.any(index < 0) or np.any(index >= _MAX_INDEX):
        raise ValueError("stream counter out of range")
    word1 = (np.uint32(channel) << np.uint32(_INDEX_BITS)) | index.astype(np.uint32)
    y0, y1 = threefry2x32(key, np.asarray(path_index, dtype=np.uint32), word1)
    return _to_unit(y0, y1)


@dataclass(frozen=True)
class RngStream:
    """One deterministic stream, addressed by ``(master_seed, stream_index)``.

    Draws are indexed, not consumed: ``uniform(n, start=k)`` returns draws
    ``k, ..., k+n-1`` of the given channel.
    """

    master_seed: int
    stream_index: int

    def __post_init__(self):
        _split_seed(self.master_seed)
        if self.stream_index < 0 or self.stream_index >= 1 << 32:
            raise ValueError("stream_index must fit in 32 bits")

    @property
    def key(self):
        return _split_seed(self.master_seed)

    def uniform(self, n, start=0, channel=Channel.GENERIC):
        idx = np.arange(start, start + n, dtype=np.int64)
        return _uniforms(self.key, self.stream_index, channel, idx)

    def normal(self, n, start=0, channel=Channel.GENERIC):
        return ndtri(self.uniform(n, start, channel))

    def exponential(self, n, rate, start=0, channel=Channel.GENERIC):
        return -np.log(self.uniform(n, start, channel)) / rate


def split_stream(master_seed, path_index):
    """Return the stream owned by Monte-Carlo path ``path_index``."""
    return RngStream(int(master_seed), int(path_index))


class PathStreams:
    """A block of consecutive per-path streams, advanced in lockstep.

    Path ``p`` of the block uses exactly the numbers of
    ``split_stream(master_seed, first_index + p)``, so results do not depend
    on how an ensemble is batched.
    """

    def __init__(self, master_seed, n_paths, first_index=0):
        self.master_seed = int(master_seed)
        self.key = _split_seed(master_seed)
        self.n_paths = int(n_paths)
        self.first_index = int(first_index)
        if self.first_index + self.n_paths > 1 << 32:
            raise ValueError("path indices must fit in 32 bits")
        self.indices = np.arange(self.first_index, self.first_index + self.n_paths, dtype=np.uint32)

    def stream(self, p):
        return RngStream(self.master_seed, self.first_index + p)

    def uniform(self, channel, index, paths=None):
        """Draw number ``index`` of ``channel`` for each selected path.

        ``index`` is a scalar, a per-path array, or a ``(P, k)`` array.
        """
        ids = self.indices if paths is None else self.indices[paths]
        index = np.asarray(index)
        if index.ndim == 2:
            ids = ids[:, None]
        return _uniforms(self.key, ids, channel, index)

    def uniform_block(self, channel, start, n):
        """``(P, n)`` array of draws ``start .. start+n-1``."""
        idx = np.arange(start, start + n, dtype=np.int64)[None, :]
        return _uniforms(self.key, self.indices[:, None], channel, idx)

    def normal_block(self, channel, start, n):
        return ndtri(self.uniform_block(channel, start, n))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_start = t_0 < ... < t_N = t_end``."""

    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps <= 0:
            raise ValueError("time grid needs n_steps >= 1 (empty grid)")
        if not self.t_end > self.t_start:
            raise ValueError("time grid needs t_end > t_start")

    @classmethod
    def uniform(cls, horizon, n_steps):
        return cls(0.0, float(horizon), int(n_steps))

    @property
    def dt(self):
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def points(self):
        pts = self.t_start + self.dt * np.arange(self.n_steps + 1)
        pts[-1] = self.t_end
        return pts

    def index_of(self, t, tol=1e-9):
        """Grid index of a time that must lie on the grid."""
        x = (t - self.t_start) / self.dt
        i = int(round(x))
        if abs(x - i) > tol * max(1.0, self.n_steps) or not 0 <= i <= self.n_steps:
            raise ValueError(f"time {t} is not a grid point")
        return i

    def step_containing(self, t):
        """Index ``i`` with ``t_i < t <= t_{i+1}`` (left-limit convention)."""
        i = int(np.searchsorted(self.points, t, side="left")) - 1
        return min(max(i, 0), self.n_steps - 1)


@dataclass
class BrownianPath:
    grid: TimeGrid
    increments: np.ndarray  # (n_steps, d)

    @property
    def values(self):
        d = self.increments.shape[1]
        return np.vstack([np.zeros((1, d)), np.cumsum(self.increments, axis=0)])


def sample_brownian(grid, d, stream):
    """Brownian increments on ``grid`` drawn from a single stream."""
    if d < 1:
        raise ValueError("Brownian dimension must be >= 1")
    z = stream.normal(grid.n_steps * d, channel=Channel.BROWNIAN).reshape(grid.n_steps, d)
    return BrownianPath(grid, z * np.sqrt(grid.dt))


def brownian_increments(grid, d, streams, step=None):
    """Ensemble increments, ``(P, n_steps, d)``, or ``(P, d)`` for one step.

    Uses the same counters as :func:`sample_brownian` so single-path and
    ensemble simulations agree bit for bit.
    """
    if d < 1:
        raise ValueError("Brownian dimension must be >= 1")
    sq = np.sqrt(grid.dt)
    if step is None:
        z = streams.normal_block(Channel.BROWNIAN, 0, grid.n_steps * d)
        return z.reshape(streams.n_paths, grid.n_steps, d) * sq
    return streams.normal_block(Channel.BROWNIAN, step * d, d) * sq

"""Counter-based random streams.

Every stream is a splitmix64 sequence whose starting state is derived from
``(seed, sample_index, purpose_tag)``. Because splitmix64 is a pure function
of a counter, the k-th draw of any stream can be computed without touching
other streams, which is what makes per-sample noise independent of batch
layout and of the order in which samples are processed.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1
_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


def _mix(z: np.ndarray) -> np.ndarray:
    """splitmix64 output finalizer on uint64 arrays (wrapping arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(x: int) -> int:
    """One splitmix64 step applied to a Python integer."""
    with np.errstate(over="ignore"):
        z = np.array([(x & _MASK)], dtype=np.uint64) + GOLDEN
        return int(_mix(z)[0])


def tag_hash(tag: str) -> int:
    """64-bit FNV-1a of the UTF-8 encoded tag."""
    h = 0xCBF29CE484222325
    for byte in tag.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK
    return h


def derive_state(seed: int, sample_index: int, purpose_tag: str) -> int:
    s = mix64(seed & _MASK)
    s = mix64(s ^ mix64(sample_index & _MASK))
    return mix64(s ^ tag_hash(purpose_tag))


def derive_states(seed: int, indices: np.ndarray, purpose_tag: str) -> np.ndarray:
    """Vectorised :func:`derive_state` over an array of sample indices."""
    with np.errstate(over="ignore"):
        s = np.uint64(mix64(seed & _MASK))
        idx = _mix(np.asarray(indices, dtype=np.uint64) + GOLDEN)
        s = _mix((s ^ idx) + GOLDEN)
        return _mix((s ^ np.uint64(tag_hash(purpose_tag))) + GOLDEN)


def _uniform_from_bits(bits: np.ndarray) -> np.ndarray:
    return (bits >> np.uint64(11)).astype(np.float64) * _INV_2_53


def _box_muller(u: np.ndarray) -> np.ndarray:
    # u has an even trailing length; pairs are (radius draw, angle draw)
    u1 = 1.0 - u[..., 0::2]
    u2 = u[..., 1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = _TWO_PI * u2
    out = np.empty(u.shape, dtype=np.float64)
    out[..., 0::2] = r * np.cos(theta)
    out[..., 1::2] = r * np.sin(theta)
    return out


class BatchRng:
    """A bundle of independent per-sample streams advancing in lockstep.

    Row ``i`` of every draw comes from the stream
    ``derive_state(seed, start + i, tag)``. Each draw of ``m`` values per row
    consumes exactly ``m`` counter positions of every stream (Box-Muller
    rounds odd counts up to the next even number).

    The draw methods mirror :class:`numpy.random.Generator` (``random``,
    ``standard_normal``) so either can be passed where an ``rng`` is expected.
    """

    def __init__(self, seed: int, n: int, tag: str, start: int = 0):
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        self.seed = int(seed)
        self.tag = tag
        self.start = int(start)
        self.n = int(n)
        self._states = derive_states(
            self.seed, np.arange(self.start, self.start + self.n, dtype=np.uint64), tag
        )
        self._counter = 0

    @property
    def counter(self) -> int:
        return self._counter

    def _bits(self, m: int) -> np.ndarray:
        steps = np.arange(self._counter + 1, self._counter + m + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = self._states[:, None] + steps[None, :] * GOLDEN
            out = _mix(z)
        self._counter += m
        return out

    def _split(self, size) -> tuple[tuple[int, ...], int]:
        shape = (size,) if np.isscalar(size) else tuple(size)
        if not shape or shape[0] != self.n:
            raise ValueError(f"leading dimension must be {self.n}, got shape {shape}")
        return shape, int(np.prod(shape[1:], dtype=np.int64))

    def integers_u64(self, m: int) -> np.ndarray:
        """Raw 64-bit outputs, ``m`` per stream, shape ``(n, m)``."""
        return self._bits(m)

    def random(self, size) -> np.ndarray:
        """Uniforms on [0, 1) with 53 bits of resolution."""
        shape, m = self._split(size)
        return _uniform_from_bits(self._bits(m)).reshape(shape)

    def standard_normal(self, size) -> np.ndarray:
        shape, m = self._split(size)
        m2 = m + (m & 1)
        z = _box_muller(_uniform_from_bits(self._bits(m2)))
        return z[:, :m].reshape(shape)


class RngStream:
    """A single stream; equivalent to row 0 of a one-sample :class:`BatchRng`."""

    def __init__(self, seed: int, sample_index: int, purpose_tag: str):
        self._batch = BatchRng(seed, 1, purpose_tag, start=sample_index)
        self.state = int(self._batch._states[0])

    def next_u64(self, m: int = 1) -> np.ndarray:
        return self._batch.integers_u64(m)[0]

    def random(self, size=None):
        m = 1 if size is None else int(np.prod(size))
        u = self._batch.random((1, m))[0]
        return float(u[0]) if size is None else u.reshape(size)

    def standard_normal(self, size=None):
        m = 1 if size is None else int(np.prod(size))
        z = self._batch.standard_normal((1, m))[0]
        return float(z[0]) if size is None else z.reshape(size)


def derive_stream(seed: int, sample_index: int, purpose_tag: str) -> RngStream:
    return RngStream(seed, sample_index, purpose_tag)


def sample_noise(seed: int, n: int, shape, tag: str, start: int = 0) -> np.ndarray:
    """Standard normal batch of shape ``(n, *shape)`` from per-sample streams."""
    shape = tuple(int(s) for s in shape)
    return BatchRng(seed, n, tag, start=start).standard_normal((n,) + shape)

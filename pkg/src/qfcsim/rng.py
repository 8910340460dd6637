"""Counter-based random numbers shared by every simulation stage.

Generator: Philox4x64-10 (Salmon et al., Random123), the same bit generator
numpy ships as ``numpy.random.Philox``.  A substream is addressed by a
128-bit key ``(seed, stream_id)``.  Draw number ``j`` of a substream is word
``j % 4`` of the block computed at counter ``j // 4 + 1`` (low counter word;
the three high words stay zero).  A 64-bit word ``w`` maps to a double in
[0, 1) as ``(w >> 11) * 2**-53``.  This is bit-for-bit the sequence produced
by ``numpy.random.Generator(numpy.random.Philox(key=seed | stream_id << 64))``
and is frozen: changing it changes every simulated file.

Jump-ahead is free: any draw of any substream is a pure function of
``(seed, stream_id, j)``.

Stage seeds are derived from the run seed with SplitMix64 so independent
stages (emission, conversion, detection, noise) never share substreams.
"""

from __future__ import annotations

import numba as nb
import numpy as np

MASK64 = (1 << 64) - 1

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_FOUR = np.uint64(4)
_INV53 = 1.0 / 9007199254740992.0


@nb.njit(inline="always")
def _mulhilo(a, b):
    a_lo = a & _LO32
    a_hi = a >> _S32
    b_lo = b & _LO32
    b_hi = b >> _S32
    t = a_lo * b_lo
    m1 = a_hi * b_lo
    m2 = a_lo * b_hi
    mid = (t >> _S32) + (m1 & _LO32) + (m2 & _LO32)
    hi = a_hi * b_hi + (m1 >> _S32) + (m2 >> _S32) + (mid >> _S32)
    return hi, a * b


@nb.njit(inline="always")
def philox_block(c0, k0, k1):
    """Philox4x64-10 of counter ``(c0, 0, 0, 0)`` under key ``(k0, k1)``."""
    c1 = np.uint64(0)
    c2 = np.uint64(0)
    c3 = np.uint64(0)
    for r in range(10):
        if r > 0:
            k0 = k0 + _W0
            k1 = k1 + _W1
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@nb.njit(inline="always")
def word_to_unit(w):
    return np.float64(w >> _S11) * _INV53


@nb.njit(inline="always")
def draw_at(k0, k1, j):
    """Draw ``j`` of substream ``(k0, k1)`` as a double in [0, 1)."""
    w0, w1, w2, w3 = philox_block(j // _FOUR + _ONE, k0, k1)
    m = j % _FOUR
    if m == 0:
        w = w0
    elif m == 1:
        w = w1
    elif m == 2:
        w = w2
    else:
        w = w3
    return word_to_unit(w)


@nb.njit(inline="always")
def stream_next(st):
    """Sequential draw from a substream cursor.

    ``st`` is a uint64[7] array: key words, next draw index, 4-word buffer.
    """
    j = st[2]
    m = j % _FOUR
    if m == 0:
        w0, w1, w2, w3 = philox_block(j // _FOUR + _ONE, st[0], st[1])
        st[3] = w0
        st[4] = w1
        st[5] = w2
        st[6] = w3
    st[2] = j + _ONE
    return word_to_unit(st[3 + m])


@nb.njit(inline="always")
def stream_reset(st, k0, k1):
    st[0] = k0
    st[1] = k1
    st[2] = np.uint64(0)


@nb.njit(cache=True, nogil=True)
def _uniforms_at(k0, stream_ids, positions, out):
    for i in range(stream_ids.shape[0]):
        out[i] = draw_at(k0, stream_ids[i], positions[i])


@nb.njit(cache=True, nogil=True)
def _fill_sequential(k0, k1, start, out):
    for i in range(out.shape[0]):
        out[i] = draw_at(k0, k1, start + np.uint64(i))


def uniforms_at(seed: int, stream_ids, positions) -> np.ndarray:
    """Vectorised random access: draw ``positions[i]`` of substream ``stream_ids[i]``."""
    ids = np.ascontiguousarray(stream_ids, dtype=np.uint64)
    pos = np.ascontiguousarray(positions, dtype=np.uint64)
    ids, pos = np.broadcast_arrays(ids, pos)
    ids = np.ascontiguousarray(ids)
    pos = np.ascontiguousarray(pos)
    out = np.empty(ids.shape[0], dtype=np.float64)
    _uniforms_at(np.uint64(seed & MASK64), ids, pos, out)
    return out


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *labels: int | str) -> int:
    """Derive an independent 64-bit key word for a named stage of a run."""
    h = splitmix64(seed & MASK64)
    for label in labels:
        if isinstance(label, str):
            raw = label.encode()
            v = 0
            for i in range(0, len(raw), 8):
                v ^= int.from_bytes(raw[i:i + 8], "little")
                v = splitmix64(v)
        else:
            v = int(label) & MASK64
        h = splitmix64(h ^ v)
    return h


class RngHandle:
    """Stateful cursor on one substream ``(seed, stream_id)``.

    Identical ``(seed, stream_id)`` always yields the identical sequence, no
    matter which process or thread creates the handle.
    """

    __slots__ = ("seed", "stream_id", "_pos", "_buf", "_buf_block")

    def __init__(self, seed: int, stream_id: int = 0, position: int = 0):
        if not (0 <= seed <= MASK64 and 0 <= stream_id <= MASK64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")
        self.seed = seed
        self.stream_id = stream_id
        self._pos = position
        self._buf = np.empty(4, dtype=np.float64)
        self._buf_block = -1

    @property
    def position(self) -> int:
        return self._pos

    def advance(self, n: int) -> None:
        """Jump ahead ``n`` draws."""
        if n < 0:
            raise ValueError("cannot jump backwards")
        self._pos += n

    def uniform(self) -> float:
        block = self._pos >> 2
        if block != self._buf_block:
            _fill_sequential(np.uint64(self.seed), np.uint64(self.stream_id),
                             np.uint64(block * 4), self._buf)
            self._buf_block = block
        u = float(self._buf[self._pos & 3])
        self._pos += 1
        return u

    def uniforms(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        _fill_sequential(np.uint64(self.seed), np.uint64(self.stream_id),
                         np.uint64(self._pos), out)
        self._pos += n
        return out

    def __repr__(self) -> str:
        return f"RngHandle(seed={self.seed}, stream_id={self.stream_id}, position={self._pos})"


def rng_uniform(handle: RngHandle) -> float:
    """Next real in [0, 1) from ``handle``."""
    return handle.uniform()

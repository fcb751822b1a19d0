"""Counter-based 64-bit generator used for every fixture and sweep.

Word ``i`` (``i = 0, 1, ...``) of the stream with seed ``s`` is

    z = (s + (i + 1) * 0x9E3779B97F4A7C15) mod 2^64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2^64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB mod 2^64
    word = z ^ (z >> 31)

Derived values:

* uniform double in [0, 1): ``(word >> 11) * 2^-53``
* uniform int8 code: ``(word >> 56) - 128``
* integer in [lo, hi]: ``lo + ((word >> 11) * (hi - lo + 1)) >> 53``
* standard normal: two consecutive words ``a, b`` give
  ``u1 = ((a >> 11) + 1) * 2^-53`` and ``u2 = (b >> 11) * 2^-53``, then
  ``sqrt(-2 ln u1) * cos(2 pi u2)``

Because any word is a pure function of ``(seed, i)``, generation can be split
across workers without changing the stream.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def words(seed: int, start: int, count: int) -> np.ndarray:
    """Words ``start .. start + count - 1`` of stream ``seed`` as uint64."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & MASK64) + idx * np.uint64(GAMMA)
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, index: int) -> int:
    """Independent child seed, e.g. one per test case."""
    return int(words(seed, index, 1)[0])


class CounterRNG:
    """Sequential reader over one counter-based stream."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.counter = 0

    def _take(self, count: int) -> np.ndarray:
        out = words(self.seed, self.counter, count)
        self.counter += count
        return out

    def uniform(self, size) -> np.ndarray:
        n = int(np.prod(size))
        return ((self._take(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53).reshape(size)

    def int8(self, size) -> np.ndarray:
        n = int(np.prod(size))
        return ((self._take(n) >> np.uint64(56)).astype(np.int64) - 128).reshape(size)

    def integers(self, lo: int, hi: int, size=None):
        """Uniform integers in the closed range ``[lo, hi]``."""
        n = 1 if size is None else int(np.prod(size))
        span = hi - lo + 1
        top = (self._take(n) >> np.uint64(11)).tolist()
        vals = np.array([lo + ((t * span) >> 53) for t in top], dtype=np.int64)
        return int(vals[0]) if size is None else vals.reshape(size)

    def normal(self, size) -> np.ndarray:
        n = int(np.prod(size))
        w = self._take(2 * n)
        u1 = ((w[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (w[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)).reshape(size)

"""Deterministic random streams.

All randomness in flowlab flows through :class:`Stream`, a thin layer over the
Philox4x64-10 counter-based generator (Salmon et al., 2011).  A stream is
identified by a 128-bit key ``(seed, stream_id)``; the counter starts at zero
and each block yields four 64-bit words, consumed in order.

Derived quantities are defined on the raw words so any language with a
Philox4x64-10 implementation reproduces them:

* uniform in [0, 1): ``(word >> 11) * 2**-53``
* standard normal: Box-Muller on uniform pairs ``(u1, u2)``,
  ``r = sqrt(-2 log(1 - u1))``, emitting ``r cos(2 pi u2)`` then
  ``r sin(2 pi u2)``
* integer in [0, n): ``floor(uniform * n)``
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_TWO_POW_M53 = 2.0**-53


class Stream:
    """A reproducible source of uniforms, normals and integers."""

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._bitgen = np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))

    def __repr__(self) -> str:
        return f"Stream(seed={self.seed}, stream_id={self.stream_id})"

    def spawn(self, stream_id: int) -> "Stream":
        """Independent stream sharing this seed; order-independent by construction."""
        return Stream(self.seed, stream_id)

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(int(n))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53
        u = low + (high - low) * u
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def normal(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        ang = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1).ravel()[:n]
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def integers(self, n: int, size=None):
        if n <= 0:
            raise ValueError("n must be positive")
        u = self.uniform(size)
        out = np.floor(np.asarray(u) * n).astype(np.int64)
        return int(out) if size is None else out

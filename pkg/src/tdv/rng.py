"""Reproducible random numbers.

All randomness in the package goes through :class:`CounterRNG`, a thin layer
over the Philox-4x64-10 counter-based generator shipped with numpy.  The
conversion of raw 64-bit words to floats is done here explicitly, so a stream
can be regenerated in any language that implements Philox-4x64-10:

* key = ``seed`` (64-bit), counter starts at 0, words are consumed in order;
* uniform double ``u = (word >> 11) * 2**-53`` lies in [0, 1);
* standard normals come in pairs from Box-Muller on two uniforms
  ``u1, u2``: ``r = sqrt(-2 log(1 - u1))``, ``(r cos(2 pi u2), r sin(2 pi u2))``.
"""

import numpy as np

_TWO_POW_M53 = 2.0 ** -53


class CounterRNG:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._bitgen = np.random.Philox(key=self.seed & 0xFFFFFFFFFFFFFFFF)

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(n)

    def uniform(self, size=None) -> np.ndarray:
        n = int(np.prod(size)) if size is not None else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53
        return u.reshape(size) if size is not None else u[0]

    def normal(self, size) -> np.ndarray:
        n = int(np.prod(size))
        m = (n + 1) // 2
        u = self.uniform((m, 2))
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        a = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(a), r * np.sin(a)], axis=1).reshape(-1)
        return z[:n].reshape(size)

    def integers(self, high: int, size) -> np.ndarray:
        """Uniform integers in [0, high) by floor(u * high)."""
        return np.floor(self.uniform(size) * high).astype(np.int64)

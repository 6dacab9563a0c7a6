"""Portable random streams.

Every stochastic quantity in the package is drawn from a Philox4x64-10
counter-based generator whose 128-bit key is ``(seed, stream)``. Block
``b = 1, 2, ...`` encrypts the 256-bit counter ``(b, 0, 0, 0)`` and yields
four 64-bit words in order. No seed hashing is involved, so the raw output
sequence is fully determined by the two integers and can be reproduced in
any language that implements Philox4x64-10.

Conversions on top of the raw words:

* uniform on [0, 1): ``(word >> 11) * 2**-53``
* standard normal: Box-Muller on consecutive uniform pairs ``(u1, u2)``,
  ``r = sqrt(-2 log(1 - u1))``, emitting ``r cos(2 pi u2)`` then
  ``r sin(2 pi u2)``.
"""

import numpy as np

_TWO_POW_M53 = 2.0 ** -53


class Stream:
    """A keyed Philox4x64-10 stream with uniform and Box-Muller draws."""

    def __init__(self, seed, stream=0):
        if seed < 0 or stream < 0:
            raise ValueError("seed and stream must be non-negative integers")
        key = np.array([seed, stream], dtype=np.uint64)
        self.seed = int(seed)
        self.stream = int(stream)
        self._bitgen = np.random.Philox(key=key, counter=0)

    def raw(self, n):
        return self._bitgen.random_raw(int(n))

    def uniform(self, n, low=0.0, high=1.0):
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53
        return low + (high - low) * u

    def normal(self, n, loc=0.0, scale=1.0):
        n = int(n)
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return loc + scale * z[:n]

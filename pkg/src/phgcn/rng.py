"""Counter-based SplitMix64 stream used for every random draw in the package.

The generator is fully specified here so other implementations can reproduce
the exact same numbers:

* output ``i`` (0-based) of a stream keyed by ``key`` is
  ``mix64(key + (i + 1) * 0x9E3779B97F4A7C15 mod 2**64)`` where ``mix64`` is the
  SplitMix64 finalizer (xor-shift 30, mul 0xBF58476D1CE4E5B9, xor-shift 27,
  mul 0x94D049BB133111EB, xor-shift 31).
* uniform doubles in [0, 1) are ``(u64 >> 11) * 2**-53``.
* normals come from Box-Muller on consecutive pairs ``(a, b)``:
  ``r = sqrt(-2 ln(1 - a))``, emitting ``r cos(2 pi b)`` then ``r sin(2 pi b)``.
  An odd request still consumes a whole pair.
* integers in ``[0, n)`` are ``floor(uniform * n)``.
* child seeds: ``derive_seed(seed, stream) = mix64(seed XOR mix64(stream + GAMMA))``.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# stream ids for derive_seed
STREAM_SYNTH = 1
STREAM_INIT = 2
STREAM_SHUFFLE = 3
STREAM_GRADCHECK = 4


def _mix_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z = x & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, stream: int) -> int:
    return mix64((seed & MASK64) ^ mix64(stream + GAMMA))


class SplitMix64:
    """Stateful view over the counter-based stream (only the counter mutates)."""

    def __init__(self, seed: int):
        self.key = int(seed) & MASK64
        self.counter = 0

    def u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * np.uint64(GAMMA)
        return _mix_array(z)

    def uniform(self, n: int) -> np.ndarray:
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        out = np.empty((pairs, 2))
        out[:, 0] = r * np.cos(theta)
        out[:, 1] = r * np.sin(theta)
        return out.reshape(-1)[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        return np.floor(self.uniform(n) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates, walking i = n-1 .. 1 with j uniform in [0, i]."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

"""Portable deterministic random streams.

Every stochastic routine in the package draws from an :class:`RngState`:
a xoshiro256** generator whose 256-bit state is expanded from a 64-bit
seed with splitmix64. The stream depends only on the seed and on the
sequence of draws, so results are identical across platforms.
"""

import math

import numpy as np
from numba import njit

_MASK64 = (1 << 64) - 1
_TWO_PI = 2.0 * math.pi


def splitmix64(x):
    """Return ``(next_state, output)`` of one splitmix64 step."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


@njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def _fill(s, out):
    # s: uint64[4], advanced in place
    for i in range(out.shape[0]):
        result = _rotl(s[1] * np.uint64(5), 7) * np.uint64(9)
        t = s[1] << np.uint64(17)
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        out[i] = result


class RngState:
    """xoshiro256** stream seeded through splitmix64.

    Parameters
    ----------
    seed : int
        Any integer; reduced modulo 2**64.
    counter : int, default=0
        Number of 64-bit words already consumed. Restoring ``(seed, counter)``
        reproduces the stream position exactly.
    """

    def __init__(self, seed=0, counter=0):
        self.seed = int(seed) & _MASK64
        x = self.seed
        words = []
        for _ in range(4):
            x, z = splitmix64(x)
            words.append(z)
        self._s = np.array(words, dtype=np.uint64)
        self.counter = 0
        if counter:
            self.next_u64(int(counter))

    def __repr__(self):
        return f"RngState(seed={self.seed}, counter={self.counter})"

    def state_dict(self):
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state):
        return cls(state["seed"], state["counter"])

    def next_u64(self, n):
        out = np.empty(int(n), dtype=np.uint64)
        if n:
            _fill(self._s, out)
        self.counter += int(n)
        return out

    def random(self, n):
        """Uniform doubles in [0, 1) built from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def uniform(self, low, high, size):
        size = tuple(np.atleast_1d(size).astype(int)) if not np.isscalar(size) else (int(size),)
        n = int(np.prod(size))
        return (low + (high - low) * self.random(n)).reshape(size)

    def normal(self, size, loc=0.0, scale=1.0):
        """Gaussian draws by the Box-Muller transform (two uniforms per pair)."""
        size = tuple(np.atleast_1d(size).astype(int)) if not np.isscalar(size) else (int(size),)
        n = int(np.prod(size))
        m = (n + 1) // 2
        u = self.random(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1], keeps log finite
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(_TWO_PI * u2), r * np.sin(_TWO_PI * u2)])[:n]
        return (loc + scale * z).reshape(size)

    def integers(self, n_values, size):
        """Integers in ``[0, n_values)`` via the multiply-shift reduction."""
        u = self.random(int(size))
        return np.minimum((u * n_values).astype(np.int64), n_values - 1)

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.random(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn_seeds(self, n):
        """Draw ``n`` child seeds for independent sub-streams."""
        return [int(v) for v in self.next_u64(n)]

    def spawn(self, n):
        return [RngState(s) for s in self.spawn_seeds(n)]


def as_rng(rng):
    """Coerce ``None``/int/RngState into an :class:`RngState`."""
    if isinstance(rng, RngState):
        return rng
    if rng is None:
        return RngState(0)
    if isinstance(rng, (int, np.integer)):
        return RngState(int(rng))
    raise TypeError(f"cannot build an RngState from {type(rng).__name__}")

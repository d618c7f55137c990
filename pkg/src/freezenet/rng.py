"""Counter-based pseudo-random streams.

The generator here is part of the checkpoint wire format: frozen weights are
*regenerated* from a stored seed, so every detail below (generator algorithm,
word packing, uniform scaling, Box-Muller consumption order) is frozen and
versioned with the checkpoint format, not an implementation detail.

Format contract
---------------
* Generator: Philox4x32 with 10 rounds (multipliers 0xD2511F53 / 0xCD9E8D57,
  key increments 0x9E3779B9 / 0xBB67AE85). One block maps a 4-word counter and
  a 2-word key to 4 output words of 32 bits.
* Stream state is (seed: u64, purpose, counter: u64). The Philox key is
  splitmix64(seed XOR purpose_tag) split little-end-first into (k0, k1).
  Purpose tags are the ASCII constants "init", "shuf", "rscu", "rein", so
  distinct purposes use unrelated keys and never share state.
* The counter counts 64-bit outputs. Output i comes from Philox block i >> 1
  (block counter words: c0 = low32(block), c1 = high32(block), c2 = c3 = 0).
  Even i packs output words (x0, x1) as x0 | x1 << 32; odd i packs (x2, x3)
  as x2 | x3 << 32. Jumping to any counter is O(1).
* uniform(lo, hi): u = (x >> 11) * 2^-53 in [0, 1), value = lo + (hi-lo) * u.
* normal(mean, std): Box-Muller on consecutive output pairs (a, b):
  u1 = ((a >> 11) + 1) * 2^-53 in (0, 1], u2 = (b >> 11) * 2^-53 in [0, 1),
  r = sqrt(-2 ln u1), z0 = r cos(2 pi u2), z1 = r sin(2 pi u2); z0 and z1 are
  both emitted, in that order. A request for n samples always consumes
  2 * ceil(n / 2) outputs (an odd n discards the final z1 but the counter
  still advances past it).
* permutation(n): Fisher-Yates, i from n-1 down to 1, j = output % (i + 1).
  The modulo bias is < n / 2^64 (< 6e-15 for MNIST-sized n) and accepted.

All sampling is done in float64; casting to float32 (when a caller wants f32
parameters) is itself part of the parameter-regeneration contract.
"""

import numpy as np

from .errors import ParameterError

_MASK32 = 0xFFFFFFFF
_MASK64 = 0xFFFFFFFFFFFFFFFF

_PHILOX_M0 = 0xD2511F53
_PHILOX_M1 = 0xCD9E8D57
_PHILOX_W0 = 0x9E3779B9
_PHILOX_W1 = 0xBB67AE85

PURPOSES = {
    "init": 0x696E6974,
    "shuffle": 0x73687566,
    "rescue": 0x72736375,
    "reinit": 0x7265696E,
}


def splitmix64(x: int) -> int:
    """First output of a splitmix64 stream seeded with x."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def philox4x32(counters: np.ndarray, key0: int, key1: int, rounds: int = 10) -> np.ndarray:
    """Vectorized Philox4x32. counters: (n, 4) uint64 with 32-bit values.

    Returns (n, 4) uint64 output words (each < 2^32). 32x32-bit products fit
    in uint64 so no modular juggling is needed beyond masking the key bumps.
    """
    c0 = counters[:, 0].copy()
    c1 = counters[:, 1].copy()
    c2 = counters[:, 2].copy()
    c3 = counters[:, 3].copy()
    k0 = key0
    k1 = key1
    for _ in range(rounds):
        p0 = _PHILOX_M0 * c0
        p1 = _PHILOX_M1 * c2
        hi0 = p0 >> np.uint64(32)
        lo0 = p0 & np.uint64(_MASK32)
        hi1 = p1 >> np.uint64(32)
        lo1 = p1 & np.uint64(_MASK32)
        c0, c1, c2, c3 = hi1 ^ c1 ^ np.uint64(k0), lo1, hi0 ^ c3 ^ np.uint64(k1), lo0
        k0 = (k0 + _PHILOX_W0) & _MASK32
        k1 = (k1 + _PHILOX_W1) & _MASK32
    return np.stack([c0, c1, c2, c3], axis=1)


class RngStream:
    """Seedable stream over (seed, purpose, counter). Single-owner: do not
    share one instance across threads."""

    def __init__(self, seed: int, purpose: str, counter: int = 0):
        if purpose not in PURPOSES:
            raise ParameterError(f"unknown stream purpose {purpose!r}")
        if not 0 <= seed <= _MASK64:
            raise ParameterError("seed must fit in 64 bits")
        self.seed = seed
        self.purpose = purpose
        self.counter = counter
        key = splitmix64((seed ^ PURPOSES[purpose]) & _MASK64)
        self._key0 = key & _MASK32
        self._key1 = key >> 32

    def skip(self, n: int) -> None:
        """Advance the counter without generating (O(1) jump)."""
        self.counter += n

    def raw_u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise ParameterError("sample count must be nonnegative")
        if n == 0:
            return np.empty(0, dtype=np.uint64)
        first_block = self.counter >> 1
        last_block = (self.counter + n - 1) >> 1
        blocks = np.arange(first_block, last_block + 1, dtype=np.uint64)
        counters = np.zeros((len(blocks), 4), dtype=np.uint64)
        counters[:, 0] = blocks & np.uint64(_MASK32)
        counters[:, 1] = blocks >> np.uint64(32)
        words = philox4x32(counters, self._key0, self._key1)
        out = np.empty(2 * len(blocks), dtype=np.uint64)
        out[0::2] = words[:, 0] | (words[:, 1] << np.uint64(32))
        out[1::2] = words[:, 2] | (words[:, 3] << np.uint64(32))
        offset = self.counter & 1
        self.counter += n
        return out[offset:offset + n]

    def uniform(self, lo: float, hi: float, n: int) -> np.ndarray:
        if not lo < hi:
            raise ParameterError(f"uniform requires lo < hi, got [{lo}, {hi})")
        u = (self.raw_u64(n) >> np.uint64(11)) * 2.0 ** -53
        return lo + (hi - lo) * u

    def normal(self, mean: float, std: float, n: int) -> np.ndarray:
        if std <= 0:
            raise ParameterError(f"normal requires std > 0, got {std}")
        if n < 0:
            raise ParameterError("sample count must be nonnegative")
        pairs = (n + 1) // 2
        x = self.raw_u64(2 * pairs)
        u1 = ((x[0::2] >> np.uint64(11)) + np.uint64(1)) * 2.0 ** -53
        u2 = (x[1::2] >> np.uint64(11)) * 2.0 ** -53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return mean + std * z[:n]

    def randbelow(self, bound: int) -> int:
        """One integer in [0, bound) via a single 64-bit draw."""
        if bound <= 0:
            raise ParameterError("randbelow needs a positive bound")
        return int(self.raw_u64(1)[0]) % bound

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n); consumes n-1 draws."""
        arr = list(range(n))
        if n > 1:
            draws = self.raw_u64(n - 1).tolist()
            for idx, i in enumerate(range(n - 1, 0, -1)):
                j = draws[idx] % (i + 1)
                arr[i], arr[j] = arr[j], arr[i]
        return np.asarray(arr, dtype=np.int64)

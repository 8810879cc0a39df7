"""Deterministic random streams for reproducible fault campaigns.

The generator is fixed by construction so that a 64-bit seed produces the
same draw sequence on every platform:

* ``splitmix64`` is the seeding / seed-derivation mixer.
* The stream itself is a bank of ``LANES`` xoshiro256** generators whose
  states are filled from consecutive splitmix64 outputs.  Raw 64-bit draws
  are emitted lane-interleaved, one round at a time:
  ``lane0, lane1, ..., lane{LANES-1}, lane0, ...``.

The interleaving constant and all derived transforms (uniform doubles via
the top 53 bits, normals via Box-Muller on consecutive uniform pairs,
bounded integers via rejection sampling) are part of the stream definition
and must not change, or previously recorded campaigns stop reproducing.
"""

from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def splitmix64(x: int) -> int:
    """One full splitmix64 step (advance + finalize) of a 64-bit value."""
    z = (x + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _splitmix64_block(seed: int, count: int) -> np.ndarray:
    """First `count` outputs of the splitmix64 sequence started at `seed`."""
    idx = np.arange(1, count + 1, dtype=np.uint64)
    z = np.uint64(seed & MASK64) + idx * np.uint64(_GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class RngStream:
    """Seeded stream of raw 64-bit words and values derived from them."""

    LANES = 1024

    def __init__(self, seed: int):
        if not 0 <= seed <= MASK64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        state = _splitmix64_block(seed, 4 * self.LANES).reshape(self.LANES, 4)
        self._s0 = state[:, 0].copy()
        self._s1 = state[:, 1].copy()
        self._s2 = state[:, 2].copy()
        self._s3 = state[:, 3].copy()
        self._buf = np.empty(0, dtype=np.uint64)

    def _round(self) -> np.ndarray:
        """One xoshiro256** round across all lanes; returns LANES words."""
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        out = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._s3 = _rotl(s3, 45)
        return out

    def _take(self, n: int) -> np.ndarray:
        while self._buf.size < n:
            self._buf = np.concatenate([self._buf, self._round()])
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def u64(self, size: int | None = None):
        """Raw draws; a single int when size is None, else a uint64 array."""
        if size is None:
            return int(self._take(1)[0])
        return self._take(size)

    def uniform(self, size: int) -> np.ndarray:
        """Doubles in (0, 1], from the top 53 bits of each word."""
        bits = self._take(size) >> np.uint64(11)
        return (bits.astype(np.float64) + 1.0) * 2.0**-53

    def normals(self, size: int) -> np.ndarray:
        """Standard normal draws via Box-Muller on consecutive uniform pairs."""
        pairs = (size + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        theta = (2.0 * np.pi) * u[1::2]
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:size]

    def integers(self, bound: int, size: int | None = None):
        """Uniform integers in [0, bound) by rejection (no modulo bias)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        n = 1 if size is None else size
        out = self._bounded(np.full(n, bound, dtype=np.uint64))
        if size is None:
            return int(out[0])
        return out

    def _bounded(self, bounds: np.ndarray) -> np.ndarray:
        """Per-element uniform draws in [0, bounds[i]); bounds are uint64 > 0."""
        # Accept draws below the largest multiple of bound that fits in
        # [0, 2^64 - 1]; the accepted range folds uniformly under mod.
        limits = (np.iinfo(np.uint64).max // bounds) * bounds
        out = np.empty(bounds.size, dtype=np.uint64)
        pending = np.arange(bounds.size)
        while pending.size:
            draws = self._take(pending.size)
            ok = draws < limits[pending]
            idx = pending[ok]
            out[idx] = draws[ok] % bounds[idx]
            pending = pending[~ok]
        return out

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), uniformly, via partial Fisher-Yates."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot choose {k} from {n}")
        if k == 0:
            return np.empty(0, dtype=np.int64)
        bounds = np.arange(n, n - k, -1, dtype=np.uint64)
        offsets = self._bounded(bounds)
        pool = np.arange(n, dtype=np.int64)
        for i, off in enumerate(offsets):
            j = i + int(off)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


def derive_seed(base_seed: int, index: int) -> int:
    """Stream seed for instance `index` of a campaign: splitmix64(base ^ index)."""
    return splitmix64((base_seed ^ index) & MASK64)

"""Seeded pseudo-randomness with platform-independent bit streams.

All randomness in this package flows through :class:`SeededRng`, which is
built on xoshiro256** states seeded via splitmix64 (both public-domain
generators by Blackman & Vigna). The update rules use only wrapping uint64
arithmetic, so the produced stream is bit-identical across platforms and
numpy versions. To make bulk draws fast, the generator keeps a bank of
independent streams and interleaves them: draw i comes from stream
i mod STREAMS. One vectorized state update refills the whole bank.
"""

from __future__ import annotations

import numpy as np

_U64 = np.uint64
_MASK64 = 0xFFFFFFFFFFFFFFFF

# Number of interleaved xoshiro256** streams. Fixed: changing it changes
# the output stream for a given seed.
STREAMS = 256

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# 2^-53, for mapping the top 53 bits of a u64 to [0, 1).
_INV53 = float(2.0**-53)


def _splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state, returning (new_state, output)."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    z = z ^ (z >> 31)
    return state, z


def derive_seed(master: int, *parts: int | str) -> int:
    """Deterministically derive a child seed from a master seed and tags.

    Strings are absorbed bytewise, integers by value, so e.g.
    ``derive_seed(s, "sample", n, trial)`` gives stable per-trial seeds
    that are independent of Python's salted ``hash``.
    """
    state = master & _MASK64
    state, _ = _splitmix64(state)
    for part in parts:
        if isinstance(part, str):
            data = part.encode("utf-8")
            chunks = [data[i : i + 8] for i in range(0, len(data), 8)]
            values = [int.from_bytes(c, "little") for c in chunks] or [0]
            values.append(len(data))
        else:
            values = [int(part) & _MASK64]
        for v in values:
            state = (state ^ v) & _MASK64
            state, _ = _splitmix64(state)
    _, out = _splitmix64(state)
    return out


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << _U64(k)) | (x >> _U64(64 - k))


class SeededRng:
    """Deterministic random stream: identical seed, identical draws.

    Not thread-safe; each concurrent consumer owns its own instance
    (spawn children with :meth:`child`).
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        state = self.seed
        raw = np.empty((4, STREAMS), dtype=np.uint64)
        for j in range(STREAMS):
            for i in range(4):
                state, out = _splitmix64(state)
                raw[i, j] = out
        self._s0, self._s1, self._s2, self._s3 = raw
        self._buffer = np.empty(0, dtype=np.uint64)
        self._pos = 0

    def child(self, *parts: int | str) -> "SeededRng":
        """Independent generator derived from this seed and the tags."""
        return SeededRng(derive_seed(self.seed, *parts))

    def _refill(self) -> None:
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        out = _rotl(s1 * _U64(5), 7) * _U64(9)
        t = s1 << _U64(17)
        s2 = s2 ^ s0
        s3 = s3 ^ s1
        s1 = s1 ^ s2
        s0 = s0 ^ s3
        s2 = s2 ^ t
        s3 = _rotl(s3, 45)
        self._s0, self._s1, self._s2, self._s3 = s0, s1, s2, s3
        self._buffer = out
        self._pos = 0

    def u64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit draws."""
        if n < 0:
            raise ValueError("draw count must be non-negative")
        pieces = []
        remaining = n
        while remaining > 0:
            if self._pos >= self._buffer.shape[0]:
                self._refill()
            take = min(remaining, self._buffer.shape[0] - self._pos)
            pieces.append(self._buffer[self._pos : self._pos + take])
            self._pos += take
            remaining -= take
        if not pieces:
            return np.empty(0, dtype=np.uint64)
        return np.concatenate(pieces) if len(pieces) > 1 else pieces[0].copy()

    def next_u64(self) -> int:
        return int(self.u64(1)[0])

    def uniform(self, n: int | None = None):
        """Float64 draws in [0, 1) with 53-bit resolution."""
        if n is None:
            return float(self.u64(1)[0] >> _U64(11)) * _INV53
        return (self.u64(n) >> _U64(11)).astype(np.float64) * _INV53

    def integers(self, bound: int, n: int | None = None):
        """Draws uniform over {0, ..., bound-1}."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        if n is None:
            return min(int(self.uniform() * bound), bound - 1)
        vals = np.floor(self.uniform(n) * bound).astype(np.int64)
        return np.minimum(vals, bound - 1)

    def normal(self, shape=None, scale: float = 1.0) -> np.ndarray:
        """Gaussian draws via Box-Muller (fixed two-uniform consumption)."""
        if shape is None:
            return float(self.normal((1,), scale)[0])
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        count = int(np.prod(shape)) if shape else 1
        pairs = (count + 1) // 2
        u1 = np.maximum(self.uniform(pairs), _INV53)
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:count]
        return (scale * z).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Uniformly random permutation of range(n)."""
        if n < 0:
            raise ValueError("n must be non-negative")
        keys = self.u64(n)
        return np.argsort(keys, kind="stable")

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices drawn uniformly from range(n)."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} distinct values from {n}")
        return self.permutation(n)[:k]

"""Counter-based SplitMix64 random streams.

Every random draw in the package (scene synthesis, weight init, shuffling,
augmentation) goes through :class:`Stream` so results depend only on the seed,
never on the numpy version or platform.  A stream is a 64-bit key plus a
counter; draw ``i`` is ``mix(key + i * GOLDEN)``, which makes block draws
vectorizable and child streams cheap to derive.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _mix_int(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK
    digest = hashlib.blake2b(str(tag).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Stream:
    """A splittable stream of pseudo-random numbers."""

    def __init__(self, seed: int = 0):
        self.key = _mix_int(_tag_to_int(seed) ^ 0x5DEECE66D)
        self.counter = 0

    def child(self, *tags) -> "Stream":
        """Independent stream derived from this stream's key and ``tags``.

        Deriving a child does not advance the parent.
        """
        key = self.key
        for tag in tags:
            key = _mix_int(key ^ _mix_int(_tag_to_int(tag) + _GOLDEN))
        out = Stream.__new__(Stream)
        out.key = key
        out.counter = 0
        return out

    def seed_int(self) -> int:
        """A 63-bit integer seed derived from the key (for config records)."""
        return self.key >> 1

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * np.uint64(_GOLDEN)
            return _mix_array(z)

    def uniform(self, size) -> np.ndarray:
        """Float64 uniforms in [0, 1)."""
        shape = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape)

    def normal(self, size) -> np.ndarray:
        """Standard normals by the Box-Muller transform."""
        shape = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(shape)

    def gamma(self, shape_param: float, size, scale: float = 1.0) -> np.ndarray:
        """Gamma variates (shape >= 1) by Marsaglia-Tsang rejection."""
        if shape_param < 1:
            raise ValueError(f"gamma shape must be >= 1, got {shape_param}")
        shape = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        d = shape_param - 1.0 / 3.0
        c = 1.0 / np.sqrt(9.0 * d)
        out = np.empty(n)
        todo = np.arange(n)
        while todo.size:
            m = todo.size
            x = self.normal(m)
            u = self.uniform(m)
            v = (1.0 + c * x) ** 3
            with np.errstate(invalid="ignore", divide="ignore"):
                ok = (v > 0) & (np.log(u) < 0.5 * x * x + d - d * v + d * np.log(v))
            out[todo[ok]] = d * v[ok]
            todo = todo[~ok]
        return (out * scale).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def integers(self, high: int, size) -> np.ndarray:
        """Integers uniform on [0, high)."""
        return np.minimum((self.uniform(size) * high).astype(np.int64), high - 1)

"""Deterministic pseudo-randomness for every stochastic choice in the package.

The generator is SplitMix64 run in counter mode: raw sample ``i`` of a stream
is ``mix64(seed + (i + 1) * GOLDEN)`` with all arithmetic modulo 2**64, so a
stream is a pure function of ``(seed, counter)`` and replays bit-identically
on the same platform.  Uniform doubles take the top 53 bits; Gaussians come
from the Box-Muller transform applied to pairs of uniforms.  Box-Muller goes
through libm (log/cos/sin), so cross-platform agreement is only within
floating-point rounding, on the order of 1e-10 per draw; same-platform runs
are exact.

``derive`` builds a child stream from hashed tags without consuming parent
state, which is what makes run schedules extensible: adding later phases to
a training run cannot perturb the draws of earlier ones.
"""

from __future__ import annotations

import math

import numpy as np

_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_MASK = (1 << 64) - 1
_INV_2_53 = 2.0 ** -53


def _mix64_int(z: int) -> int:
    """SplitMix64 finalizer on a Python int, modulo 2**64."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX_A) & _MASK
    z = ((z ^ (z >> 27)) * _MIX_B) & _MASK
    return z ^ (z >> 31)


def _mix64(z: np.ndarray) -> np.ndarray:
    # vectorized finalizer; uint64 arithmetic wraps mod 2**64 by construction
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_A)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_B)
    return z ^ (z >> np.uint64(31))


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & _MASK
    return h


class Rng:
    """Counter-based SplitMix64 stream of uniforms, Gaussians and integers.

    Instances are cheap value objects: ``seed`` fixes the stream, ``counter``
    is the read position.  All sampling methods advance the counter by the
    number of raw 64-bit words consumed, and that number depends only on the
    requested output size (Gaussian draws always consume an even count), so
    identical call sequences consume identical stream prefixes.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        if not isinstance(seed, int):
            raise TypeError(f"seed must be an int, got {type(seed).__name__}")
        self.seed = seed & _MASK
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed:#x}, counter={self.counter})"

    def _raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words; advances the counter."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        words = np.uint64(self.seed) + idx * np.uint64(_GOLDEN)
        return _mix64(words)

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform float64 samples in [0, 1), shaped ``shape``."""
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return u.reshape(shape)

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Gaussian float64 samples via Box-Muller on uniform pairs.

        Consumes 2 * ceil(n / 2) raw words regardless of content, so stream
        position after the call depends only on the requested shape.
        """
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        m = (n + 1) // 2
        u1 = (self._raw(m) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        u2 = (self._raw(m) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        # 1 - u1 keeps the log argument in (0, 1], never 0
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = (2.0 * math.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (mean + std * z).reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform int64 samples in [low, high); ``high`` must exceed ``low``."""
        if high <= low:
            raise ValueError(f"integers needs high > low, got [{low}, {high})")
        shape = _as_shape(shape)
        u = self.uniform(shape)
        vals = low + np.floor(u * (high - low)).astype(np.int64)
        # u < 1 so vals < high already; clip guards against fp edge rounding
        return np.clip(vals, low, high - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        if n < 0:
            raise ValueError(f"permutation needs n >= 0, got {n}")
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.uniform((n - 1,))
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            j = min(j, i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def derive(self, *tags) -> "Rng":
        """Child stream keyed by ``tags`` (strings or ints).

        Pure function of the parent's seed and the tags; does not consume or
        disturb the parent stream.  Distinct tag tuples give statistically
        independent streams.
        """
        s = self.seed
        for tag in tags:
            if isinstance(tag, str):
                h = _fnv1a64(tag.encode("utf-8"))
            elif isinstance(tag, (int, np.integer)):
                h = _mix64_int((int(tag) + 1) * _GOLDEN)
            else:
                raise TypeError(f"derive tags must be str or int, got {type(tag).__name__}")
            s = _mix64_int((s ^ h) + _GOLDEN)
        return Rng(s)


def _as_shape(shape) -> tuple:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(d) for d in shape)

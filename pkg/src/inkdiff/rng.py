"""Counter-based random streams.

A stream is addressed by ``(seed, stream_id)`` and advanced by a 64-bit block
counter. Raw bits come from the Philox4x64 bijection (numpy's ``Philox`` bit
generator keyed with ``[seed, stream_id]``); uniforms and normals are derived
here so the transform is fixed regardless of numpy's own sampling code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_WORDS_PER_BLOCK = 4
_TWO_PI = 2.0 * np.pi


@dataclass
class RandomStream:
    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self.stream_id = int(self.stream_id) & _MASK64
        self.counter = int(self.counter)

    def child(self, stream_id: int) -> "RandomStream":
        """Independent stream sharing this seed; ``stream_id`` is mixed with the parent's."""
        mixed = (self.stream_id * 0x9E3779B97F4A7C15 + int(stream_id) + 1) & _MASK64
        return RandomStream(self.seed, mixed, 0)

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` 64-bit words; consumes ``ceil(n / 4)`` counter blocks."""
        blocks = -(-n // _WORDS_PER_BLOCK)
        bitgen = np.random.Philox(
            key=np.array([self.seed, self.stream_id], dtype=np.uint64),
            counter=np.array([self.counter & _MASK64, self.counter >> 64, 0, 0], dtype=np.uint64),
        )
        words = bitgen.random_raw(blocks * _WORDS_PER_BLOCK)
        self.counter += blocks
        return words[:n]

    def uniform(self, shape) -> np.ndarray:
        """Float64 uniforms in the open interval (0, 1)."""
        n = _size(shape)
        words = self.raw(n)
        # 53 high bits, shifted off zero so log() in Box-Muller is finite
        u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / (1 << 53))
        return u.reshape(_shape(shape))

    def integers(self, high: int, shape) -> np.ndarray:
        """Integers in ``[0, high)``."""
        return np.minimum((self.uniform(shape) * high).astype(np.int64), high - 1).reshape(_shape(shape))

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


def _shape(shape) -> tuple:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)


def _size(shape) -> int:
    dims = _shape(shape)
    if len(dims) == 0 or any(d < 1 for d in dims):
        raise ValueError(f"shape must be non-empty with positive dims, got {dims}")
    return int(np.prod(dims))


def normal(stream: RandomStream, shape, dtype=None) -> np.ndarray:
    """Standard normals via Box-Muller over the stream's uniforms."""
    from .autograd import get_default_dtype

    n = _size(shape)
    pairs = -(-n // 2)
    u = stream.uniform(2 * pairs)
    u1, u2 = u[:pairs], u[pairs:]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(_TWO_PI * u2), r * np.sin(_TWO_PI * u2)])[:n]
    return z.reshape(_shape(shape)).astype(dtype or get_default_dtype())


def uniform(stream: RandomStream, shape) -> np.ndarray:
    return stream.uniform(shape)

"""Counter-based random streams.

Every draw is addressed by (seed, stream, purpose, step): a Philox key is
derived from the first three, and the step index selects a fixed counter
window. Normals come from Box–Muller on raw words, so the number of words per
step is known in advance and any block of steps can be regenerated on its own.
"""

from __future__ import annotations

import zlib

import numpy as np

_WORDS_PER_COUNTER = 4
_TWO53 = float(2**53)


def purpose_id(purpose: str | int) -> int:
    if isinstance(purpose, int):
        return purpose
    return zlib.crc32(purpose.encode())


class CounterStream:
    """Reproducible Gaussian/uniform stream for one (seed, stream, purpose)."""

    def __init__(self, seed: int, stream: int = 0, purpose: str | int = "noise"):
        self.seed = int(seed)
        self.stream = int(stream)
        self.purpose = purpose
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream, purpose_id(purpose)))
        self.key = ss.generate_state(2, dtype=np.uint64)

    def __repr__(self):
        return f"CounterStream(seed={self.seed}, stream={self.stream}, purpose={self.purpose!r})"

    def same_source(self, other: "CounterStream") -> bool:
        return bool(np.array_equal(self.key, other.key))

    def _raw(self, start: int, count: int, words: int) -> np.ndarray:
        stride = -(-words // _WORDS_PER_COUNTER)
        bg = np.random.Philox(key=self.key, counter=start * stride)
        raw = bg.random_raw(count * stride * _WORDS_PER_COUNTER)
        return raw.reshape(count, stride * _WORDS_PER_COUNTER)[:, :words]

    def uniform_block(self, start: int, count: int, n: int) -> np.ndarray:
        """Uniforms in (0, 1) for steps start..start+count-1, shape (count, n)."""
        raw = self._raw(start, count, n)
        return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) / _TWO53

    def normal_block(self, start: int, count: int, n: int) -> np.ndarray:
        """Standard normals for a block of steps, shape (count, n)."""
        m = n + (n % 2)
        u = self.uniform_block(start, count, m)
        r = np.sqrt(-2.0 * np.log(u[:, 0::2]))
        ang = 2.0 * np.pi * u[:, 1::2]
        z = np.empty((count, m))
        z[:, 0::2] = r * np.cos(ang)
        z[:, 1::2] = r * np.sin(ang)
        return z[:, :n]

    def normals(self, step: int, n: int) -> np.ndarray:
        return self.normal_block(step, 1, n)[0]

    def uniforms(self, step: int, n: int) -> np.ndarray:
        return self.uniform_block(step, 1, n)[0]


class BlockedNormals:
    """Sequential reader over a CounterStream that prefetches steps in blocks."""

    def __init__(self, stream: CounterStream, n: int, block: int = 256):
        self.stream = stream
        self.n = n
        self.block = block
        self._start = None
        self._buf = None

    def __call__(self, step: int) -> np.ndarray:
        if self._start is None or not (self._start <= step < self._start + self.block):
            self._start = step - step % self.block
            self._buf = self.stream.normal_block(self._start, self.block, self.n)
        return self._buf[step - self._start]

"""Counter-based splittable randomness on top of numpy's Philox engine.

Every draw is a pure function of ``(seed, stream, counter)``: a fresh Philox
generator is keyed per call and the counter advances by one afterwards, so any
draw in a schedule can be reproduced (or computed on another worker) without
replaying the calls before it.  Philox's 128-bit internal counter is offset by
``counter * 2**64``, giving each draw a private block of 2^64 states -- far
more than any single call consumes -- so draws never overlap.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(a: int, b: int) -> int:
    """Mix two 64-bit words into one (splitmix64 finalizer over a*phi + b)."""
    x = (a * _GOLDEN + b) & _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


class Rng:
    """Splittable RNG addressed by (seed, stream, counter)."""

    __slots__ = ("seed", "stream", "counter")

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        for name, v in (("seed", seed), ("stream", stream), ("counter", counter)):
            if not isinstance(v, (int, np.integer)) or not 0 <= int(v) <= _MASK64:
                raise ContractError(f"{name} must be an integer in [0, 2^64): got {v!r}")
        self.seed = int(seed)
        self.stream = int(stream)
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream}, counter={self.counter})"

    def state(self) -> tuple[int, int, int]:
        return (self.seed, self.stream, self.counter)

    def _generator(self) -> np.random.Generator:
        # Key identifies (seed, stream); the user counter sits in word 2 of the
        # 4x64-bit Philox counter, i.e. an offset of counter * 2**128 states.
        bg = np.random.Philox(key=[self.seed, self.stream], counter=[0, 0, self.counter, 0])
        return np.random.Generator(bg)

    def _advance(self) -> None:
        self.counter = (self.counter + 1) & _MASK64

    # -- draws ------------------------------------------------------------

    def normal(self, shape=None, mean: float = 0.0, std: float = 1.0, dtype=np.float64):
        if std < 0:
            raise ContractError(f"std must be >= 0, got {std}")
        g = self._generator()
        out = g.normal(mean, std, size=shape)
        self._advance()
        return np.asarray(out, dtype=dtype) if shape is not None else dtype(out)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0, dtype=np.float64):
        if not low <= high:
            raise ContractError(f"need low <= high, got [{low}, {high})")
        g = self._generator()
        out = g.uniform(low, high, size=shape)
        self._advance()
        return np.asarray(out, dtype=dtype) if shape is not None else dtype(out)

    def integers(self, high, size=None):
        """Uniform integers in [0, high).  ``high`` may be a scalar or an array
        of per-element bounds (one draw call either way)."""
        arr = np.asarray(high)
        if not np.issubdtype(arr.dtype, np.integer) or np.any(arr <= 0):
            raise ContractError(f"high must be positive integer(s), got {high!r}")
        g = self._generator()
        out = g.integers(0, high, size=size)
        self._advance()
        return out

    def permutation(self, n: int) -> np.ndarray:
        if not isinstance(n, (int, np.integer)) or n < 0:
            raise ContractError(f"n must be a non-negative int, got {n!r}")
        g = self._generator()
        out = g.permutation(int(n))
        self._advance()
        return out

    # -- splitting ---------------------------------------------------------

    def split(self, n: int | None = None):
        """Derive independent child streams.  Each call consumes one counter
        step; children start at counter 0 on a mixed-away stream.
        """
        if n is None:
            child = Rng(self.seed, mix64(self.stream, self.counter), 0)
            self._advance()
            return child
        if not isinstance(n, (int, np.integer)) or n < 1:
            raise ContractError(f"n must be a positive int, got {n!r}")
        return [self.split() for _ in range(int(n))]

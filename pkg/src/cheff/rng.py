"""Counter-based random streams.

Each draw builds a fresh Philox-4x64-10 generator keyed by ``seed`` with
the call counter placed in the most significant 64-bit counter word, then
increments ``counter``.  The same ``(seed, counter)`` therefore always
yields the same block of numbers, and blocks of different calls never
overlap (numpy advances the least significant word while drawing).

Child streams for parallel consumers come from :meth:`RngState.spawn`,
which hashes ``(seed, key)`` through ``numpy.random.SeedSequence``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cheff.tensor import Tensor

ALGORITHM = "philox4x64-10/numpy"
_MASK64 = (1 << 64) - 1


@dataclass
class RngState:
    seed: int
    counter: int = 0
    algorithm: str = ALGORITHM

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self.counter = int(self.counter) & _MASK64

    def _next_generator(self) -> np.random.Generator:
        bit_gen = np.random.Philox(key=self.seed, counter=self.counter << 192)
        self.counter = (self.counter + 1) & _MASK64
        return np.random.Generator(bit_gen)

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self._next_generator().standard_normal(size=tuple(shape), dtype=dtype)

    def uniform(self, shape, dtype=np.float64) -> np.ndarray:
        return self._next_generator().random(size=tuple(shape), dtype=dtype)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        """Uniform integers in ``[low, high)``."""
        return self._next_generator().integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._next_generator().permutation(n)

    def spawn(self, key: int) -> RngState:
        """Independent child stream; does not advance this one."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(int(key),))
        return RngState(int(ss.generate_state(1, np.uint64)[0]))

    def fork(self, n: int) -> list[RngState]:
        return [self.spawn(i) for i in range(n)]

    def copy(self) -> RngState:
        return RngState(self.seed, self.counter)


def randn(rng: RngState, shape, dtype=np.float32) -> Tensor:
    """i.i.d. standard normal tensor; advances ``rng`` by one draw."""
    return Tensor(rng.normal(shape, dtype=dtype))

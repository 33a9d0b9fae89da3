"""Seeded random streams.

Draws come from numpy's Philox counter-based bit generator. The same seed
gives the same sequence within one build; nothing stronger is promised.
"""

from __future__ import annotations

import numpy as np


class Rng:
    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed & (2**64 - 1), self.stream])))

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=dtype)

    def uniform(self, shape=None) -> np.ndarray:
        return self._gen.random(size=shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def child(self, stream: int) -> "Rng":
        """Independent stream derived from this seed, not from the current position."""
        return Rng(self.seed, stream)

    def get_state(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "stream": self.stream,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.stream = int(state["stream"])
        self._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], state["stream"])
        rng.set_state(state)
        return rng

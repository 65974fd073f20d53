"""Counter-based random streams.

Every uniform draw is addressed by a key tuple (e.g. ``(layer, epoch, sample,
trial)``) plus its position ``[t, i]`` inside the requested block, so the same
neuron at the same timestep sees the same number no matter how many other
streams were consumed before it.
"""

from __future__ import annotations

import numpy as np


class CounterRNG:
    """Philox stream keyed by ``(seed, *key)``."""

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)

    def child(self, *key: int) -> "CounterRNG":
        return CounterRNG(self.seed, self.key + tuple(key))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        philox_key = ss.generate_state(2, dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=philox_key))

    def uniform(self, shape) -> np.ndarray:
        """Uniform block in [0, 1); entry ``[..., t, i]`` is fixed by the key."""
        return self.generator().random(shape)

    def normal(self, shape) -> np.ndarray:
        return self.generator().standard_normal(shape)

    def __repr__(self):
        return f"CounterRNG(seed={self.seed}, key={self.key})"


def as_counter_rng(rng) -> CounterRNG:
    if isinstance(rng, CounterRNG):
        return rng
    if rng is None:
        return CounterRNG(0)
    return CounterRNG(int(rng))

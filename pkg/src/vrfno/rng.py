"""Counter-based random streams.

Each draw derives a fresh Philox generator from (seed, counter) and bumps
the counter, so a stream is fully determined by those two integers and can
be reconstructed mid-sequence.  Child streams get disjoint key material.
"""

import numpy as np


class RngStream:
    def __init__(self, seed, counter=0):
        self.seed = int(seed)
        self.counter = int(counter)

    def _next_gen(self):
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.counter,))
        self.counter += 1
        return np.random.Generator(np.random.Philox(ss))

    def normal(self, shape, dtype=np.float32):
        return self._next_gen().standard_normal(shape).astype(dtype)

    def uniform(self, shape, low=0.0, high=1.0, dtype=np.float32):
        g = self._next_gen()
        return (low + (high - low) * g.random(shape)).astype(dtype)

    def integers(self, low, high, size):
        return self._next_gen().integers(low, high, size=size)

    def permutation(self, n):
        return self._next_gen().permutation(n)

    def child(self, key):
        """Independent stream; `key` tells siblings apart."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(0x5F5F, int(key)))
        return RngStream(int(ss.generate_state(1, np.uint64)[0]))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, counter={self.counter})"

"""Counter-based random streams.

Every consumer (data generator, parameter init, minibatch order) gets its own
``RngStream`` so draws do not depend on the order in which consumers run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# stream ids for the fixed consumers of a run
DATA = 0
INIT = 1
BATCHES = 2


@dataclass(frozen=True)
class RngStream:
    seed: int
    counter: int = 0

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        key = np.array([self.seed % 2**64, 0], dtype=np.uint64)
        ctr = np.array([0, 0, 0, self.counter % 2**64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=ctr))

    def child(self, counter: int) -> "RngStream":
        return RngStream(self.seed, counter)

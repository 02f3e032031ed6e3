"""Seeded counter-based generators.

Every stochastic routine takes an explicit generator; nothing here touches
numpy's global state.
"""

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator for ``seed``, optionally on an independent sub-stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed for a child computation."""
    return int(rng.integers(0, 2**63 - 1))

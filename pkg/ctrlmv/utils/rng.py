"""Counter-based random streams.

Each stream is a Philox generator keyed by ``(seed, *keys)`` through a SeedSequence,
so an episode or mini-batch sample can be regenerated independently of the order in
which work is scheduled.
"""

import numpy as np

# domain tags keep streams of different purposes apart for the same indices
EPISODE = 0
BEHAVIOUR = 1
SUBSET = 2
PANEL = 3
TRADEOFF = 4
PRETRAIN = 5


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, keys...)``."""
    entropy = [int(seed), *(int(k) for k in keys)]
    if any(v < 0 for v in entropy):
        raise ValueError(f"stream keys must be non-negative, got {entropy}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def spawn_seed(rng: np.random.Generator) -> int:
    """Draw a fresh 63-bit seed from an existing generator."""
    return int(rng.integers(0, 2**63 - 1))

"""Counter-based random-number streams.

All randomness in the package flows through Philox generators keyed by a
master seed plus an integer path, e.g. ``substream(seed, rep)`` for
replication ``rep`` of a study or ``substream(seed, 3, tree)`` for one tree
of one forest.  Streams derived this way are independent of each other and
of worker scheduling, so parallel runs reproduce serial ones exactly.
"""

from __future__ import annotations

import numpy as np

__all__ = ["substream", "kernel_seed"]


def substream(seed: int, *path: int) -> np.random.Generator:
    """Return the Philox generator for ``seed`` at the given integer path."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))


def kernel_seed(seed: int, *path: int) -> np.uint64:
    """64-bit seed for compiled kernels, derived like :func:`substream`."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return ss.generate_state(1, np.uint64)[0]

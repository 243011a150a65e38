"""Keyed random substreams.

Every random quantity in the package is drawn from a Philox generator whose
key is derived from ``(master seed, purpose tag, *indices)``. Philox is a
counter-based generator, so a substream depends only on its key and never on
how many other streams were consumed before it or on which thread runs it.
"""

from __future__ import annotations

import numpy as np

# purpose tags; values are part of the reproducibility contract
HUB = 0
COPY = 1
CRT = 2
EXACT = 3
TRACE = 4
TRIAL = 5
DATA = 6
CPT_TEST = 7
CRT_TEST = 8
REPLICATE = 9

MASK64 = (1 << 64) - 1


def substream(seed: int, *key: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed) & MASK64, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *key: int) -> int:
    """A 64-bit child seed for handing to an API that takes an integer seed."""
    ss = np.random.SeedSequence(int(seed) & MASK64, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return substream(0 if rng is None else int(rng))

"""Counter-based seed derivation.

Every random component gets its seed from the master seed plus a fixed path
of small integers, e.g. ``derive_seed(master, DETECTOR, kind_index)``. The
path is hashed through numpy's SeedSequence, so re-running one cell of a grid
reproduces exactly the seed it had inside the full run.
"""

from __future__ import annotations

import numpy as np

# first path element: which component the seed is for
DATA = 1
SPLIT = 2
DETECTOR = 3
GAN = 4
GENERATE = 5
RETRAIN = 6
SELECT = 7


def derive_seed(master: int, *path: int) -> int:
    if master < 0 or any(p < 0 for p in path):
        raise ValueError("seed path entries must be non-negative integers")
    state = np.random.SeedSequence([int(master), *map(int, path)]).generate_state(1, np.uint32)
    return int(state[0])


def derive_rng(master: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *path))

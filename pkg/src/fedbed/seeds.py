"""Deterministic seed derivation for every randomized subsystem.

All randomness in a job flows from one master seed. Sub-seeds are derived
with numpy's SeedSequence so that adding a new consumer never shifts the
streams of existing ones.
"""

import numpy as np

# Purpose tags keep derived streams disjoint.
DATASET = 1
PARTITION = 2
SPLIT = 3
MODEL_INIT = 4
SAMPLING = 5
TRAIN = 6
POWER = 7


def derive_seed(*keys: int) -> int:
    """Collapse (master seed, purpose, indices...) into one 32-bit seed."""
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys])
    return int(ss.generate_state(1)[0])

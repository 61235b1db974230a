"""Sub-seed derivation.

Every random stream in a run comes from one experiment seed. A stream is
identified by a role tag (XORed into the seed) plus optional integer keys such
as worker index, round or epoch, and handed to ``numpy.random.SeedSequence``.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1

# Role tags. Changing any of these changes every derived stream for that role.
INIT = 0x1A2B_3C4D_0000_0001
TEACHER = 0x1A2B_3C4D_0000_0002
FEATURES = 0x1A2B_3C4D_0000_0003
NOISE = 0x1A2B_3C4D_0000_0004
PARTITION = 0x1A2B_3C4D_0000_0005
BATCHES = 0x1A2B_3C4D_0000_0006
EXPLORE = 0x1A2B_3C4D_0000_0007
QUANT = 0x1A2B_3C4D_0000_0008
HOLDOUT = 0x1A2B_3C4D_0000_0009


def derive(seed: int, tag: int, *keys: int) -> int:
    """Return a 64-bit sub-seed for ``(seed ^ tag, *keys)``."""
    base = (int(seed) & MASK64) ^ tag
    if not keys:
        return base
    ss = np.random.SeedSequence([base, *(int(k) & MASK64 for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng(seed: int, tag: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive(seed, tag, *keys))

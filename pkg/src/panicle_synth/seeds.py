"""Root-seed substream derivation.

Every stochastic component gets its own seed computed from the root seed and a
stable stream name, so adding a consumer never shifts another one's draws::

    derive_seed(root, "split")            # train/test shuffle
    derive_seed(root, "sampler")          # random label maps
    derive_seed(root, "train/pix2pixhd")  # model init, batch order, latents
    derive_seed(root, "train/spade")
    derive_seed(root, "generate")         # latents at synthesis time
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(root: int, name: str) -> int:
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def entry_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for item ``index`` of a seeded batch job."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(index)])

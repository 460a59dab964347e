"""Named, seedable random substreams.

Every consumer of randomness gets its own PCG64 stream derived from the
scenario seed and a domain name, so adding draws in one place never shifts
another stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    tag = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "big")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), tag])))

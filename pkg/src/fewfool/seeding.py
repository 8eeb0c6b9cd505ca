"""Named random substreams derived from one root seed.

Every component that needs randomness asks for a substream by name, so
any part of a run can be reproduced in isolation from (seed, name).
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a Generator for the given root seed and stream name."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag]))

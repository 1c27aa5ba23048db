"""Order-free random streams keyed by (seed, role)."""

from __future__ import annotations

import zlib

import numpy as np


def role_seed(seed: int, role: str) -> int:
    """Independent 32-bit seed for one named role under a master seed."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(seed) >> 32 & 0xFFFFFFFF, zlib.crc32(role.encode())])
    return int(ss.generate_state(1)[0])


def stream(seed: int, role: str) -> np.random.Generator:
    return np.random.default_rng(role_seed(seed, role))

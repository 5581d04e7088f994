"""Deterministic RNG derivation from (seed, tag, ...) tuples."""

from __future__ import annotations

import numpy as np

_MASK = (1 << 63) - 1


def rng_from(*parts) -> np.random.Generator:
    """Generator seeded from any sequence of ints (negatives are masked)."""
    return np.random.default_rng([int(p) & _MASK for p in parts])

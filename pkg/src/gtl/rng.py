"""Seeded random number streams.

Everything stochastic in this package (weight init, sampling, dropout,
episode draws, synthetic data) runs off numpy's Philox bit generator, a
counter-based PRNG whose output stream depends only on its 128-bit key.
The same seed therefore reproduces the same stream on any platform.

Independent sub-streams are derived by packing a stream index into the
upper 64 bits of the key, so ``derive_rng(seed, i)`` and
``derive_rng(seed, j)`` never overlap for ``i != j``.
"""

from __future__ import annotations

import numpy as np

_U64 = 1 << 64


def make_rng(seed: int) -> np.random.Generator:
    """Generator keyed directly with the 64-bit seed (stream index 0)."""
    return derive_rng(seed, 0)


def derive_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for (seed, stream), e.g. one per episode."""
    if not 0 <= seed < _U64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    if not 0 <= stream < _U64:
        raise ValueError(f"stream must be a 64-bit unsigned integer, got {stream}")
    key = seed | (stream << 64)
    return np.random.Generator(np.random.Philox(key=key))

"""Seeded random streams.

Every stochastic operation takes an explicit 64-bit seed and builds its own
``numpy.random.Generator`` (PCG64), whose output for a given seed is the same
on every platform.  Child seeds for frames and restarts come from splitmix64.
"""

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x):
    """One splitmix64 step; returns ``(next_state, output)``."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return x, z ^ (z >> 31)


def derive_seed(seed, *path):
    """Deterministic child seed of ``seed`` along an integer path."""
    state = int(seed) & _MASK
    _, out = splitmix64(state)
    for p in path:
        state = (out ^ (int(p) & _MASK)) & _MASK
        _, out = splitmix64(state)
    return out


def generator(seed):
    return np.random.Generator(np.random.PCG64(int(seed) & _MASK))

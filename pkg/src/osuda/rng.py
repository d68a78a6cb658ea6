"""Named random sub-streams derived from one root seed.

Each consumer (data, init, lambda, perturbation, shuffle, ...) gets its own
generator, so switching one component off does not shift another's draws.
"""

import zlib

import numpy as np


def substream(seed, name, *extra):
    """Generator for stream ``name`` under root ``seed``; ``extra`` ints refine it."""
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(e) for e in extra)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))

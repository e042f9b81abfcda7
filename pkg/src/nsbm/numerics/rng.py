"""Seeded, platform-independent random streams.

Streams are Philox (counter-based) generators keyed by ``(seed, stream)``, so
any module can draw its own reproducible sequence without coordinating with
the others.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(stream):
    if isinstance(stream, (int, np.integer)):
        return int(stream) & _MASK64
    digest = hashlib.blake2b(str(stream).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed, stream=0):
    """Return a ``numpy.random.Generator`` for ``(seed, stream)``.

    ``stream`` may be an int or a string label such as ``"walks/3"``.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    key = (stream_id(stream) << 64) | (int(seed) & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


def spawn_seed(rng):
    """Draw a fresh 63-bit seed from ``rng`` (for handing to a sub-component)."""
    return int(rng.integers(0, 2**63 - 1))

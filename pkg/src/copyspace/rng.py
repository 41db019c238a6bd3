"""Seed fan-out.

A single master seed is expanded into independent streams keyed by
``(module name, index)``. The key is hashed with CRC32 so the mapping does not
depend on Python's randomized ``hash``.
"""

import zlib

import numpy as np


def stream_key(name, index=0):
    return [zlib.crc32(name.encode("utf-8")), int(index)]


def stream(seed, name, index=0):
    """Return a ``numpy.random.Generator`` for stream ``name``/``index``."""
    if seed is None:
        raise ValueError("a seed is mandatory; wall-clock seeding is not supported")
    ss = np.random.SeedSequence([int(seed)] + stream_key(name, index))
    return np.random.default_rng(ss)


def substream_seed(seed, name, index=0):
    """Integer seed derived from the stream, for APIs that want an int."""
    return int(stream(seed, name, index).integers(0, 2**63 - 1))

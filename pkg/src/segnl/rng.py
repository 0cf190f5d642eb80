"""Named random substreams derived from one global seed.

``substream(seed, "phantom", 3)`` always yields the same generator, and
renaming or adding a stream never shifts the others.
"""

import zlib

import numpy as np

STREAMS = ("phantom", "split", "watershed", "init", "dropout", "batching", "bootstrap")


def stream_key(name):
    return zlib.crc32(name.encode("utf-8"))


def substream(seed, name, *index):
    """Generator for stream ``name`` (optionally sub-indexed, e.g. by subject)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, stream_key(name), *(int(i) for i in index)]
    return np.random.default_rng(np.random.SeedSequence(entropy))

"""Named random streams derived from a single integer seed.

Every consumer of randomness asks for a generator by label, so adding a new
consumer never perturbs the streams of existing ones.  Labels are hashed
with CRC32 rather than ``hash()`` so streams are identical across processes
and hosts.
"""

import zlib

import numpy as np


def label_key(label):
    return zlib.crc32(label.encode("utf-8")) & 0xFFFFFFFF


def derive_rng(seed, label, *indices):
    """Return a generator for ``label`` (and optional integer sub-indices)."""
    key = [label_key(label)] + [int(i) for i in indices]
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(key))
    return np.random.default_rng(ss)

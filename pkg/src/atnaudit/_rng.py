"""Labeled random sub-streams.

Every random decision in the pipeline draws from a generator derived from a
master seed plus a tuple of labels, so that e.g. the negatives of user 17 do
not depend on how many users were processed before it.
"""
import zlib

import numpy as np


def _label_key(label):
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"stream labels must be non-negative, got {label}")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def substream(seed, *labels):
    """Generator for ``seed`` and the given labels (ints or strings)."""
    key = tuple(_label_key(label) for label in labels)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))

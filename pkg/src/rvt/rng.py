"""Named random streams derived from one integer seed.

``stream(seed, "synth/P03/2")`` always yields the same generator, and
streams with different labels are statistically independent, so the order
in which components draw randomness never matters.
"""

import hashlib

import numpy as np


def label_key(label):
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed, label):
    if seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), label_key(label)]))


def fold_seed(base, fold_index):
    return int(base) ^ int(fold_index)

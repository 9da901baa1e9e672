"""Deterministic derivation of named random sub-streams from a master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def _label_entropy(label) -> int:
    digest = hashlib.sha256(repr(label).encode("utf8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *labels) -> np.random.Generator:
    """Generator for the sub-stream named by ``labels`` under ``seed``.

    The stream is a pure function of (seed, labels): identical across reruns
    and independent of how work is scheduled.  Labels may be strings or ints.
    """
    entropy = [int(seed)] + [_label_entropy(label) for label in labels]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def spawn(rng: np.random.Generator, n: int) -> list:
    """Split ``n`` child generators off ``rng``'s seed sequence."""
    seq = rng.bit_generator.seed_seq
    return [np.random.default_rng(child) for child in seq.spawn(n)]

"""Counter-based random streams keyed by (seed, name, index...).

Every stochastic routine in the package takes an explicit
``numpy.random.Generator``. Experiments obtain those generators from
:func:`stream` so that a batch's draws depend only on the experiment seed
and the batch key, never on execution order or worker count.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key_words(key) -> list[int]:
    if isinstance(key, (int, np.integer)):
        return [int(key) & 0xFFFFFFFF, (int(key) >> 32) & 0xFFFFFFFF]
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def stream(seed: int, *keys) -> np.random.Generator:
    """Return a Philox generator for ``(seed, *keys)``.

    Keys may be strings (module or experiment names) or integers (batch or
    worker indices). Identical arguments give bit-identical streams.
    """
    words: list[int] = []
    for key in keys:
        words.extend(_key_words(key))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(words))
    return np.random.Generator(np.random.Philox(ss))


def child_seeds(rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` 63-bit integers used to key sub-streams from a parent."""
    return rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)

"""Deterministic, order-independent random streams.

Every stochastic operation draws from a Philox counter-based generator whose
128-bit key is derived by hashing a (seed, scope...) tuple. Each layer and
purpose gets its own independent stream, so results are bit-reproducible
regardless of evaluation order or worker count.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import PolicyError

MAX_SEED = 2**64

# Separator that cannot appear in layer keys or tags, so ("a|b", "c") and
# ("a", "b|c") derive different keys.
_SEP = "\x1f"


def validate_seed(seed: int) -> int:
    if not isinstance(seed, int) or not 0 <= seed < MAX_SEED:
        raise PolicyError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return seed


def keyed_generator(seed: int, *scope: str) -> np.random.Generator:
    """Generator for the stream identified by ``(seed, *scope)``."""
    validate_seed(seed)
    material = _SEP.join([str(seed), *scope]).encode()
    key = int.from_bytes(hashlib.sha256(material).digest()[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))

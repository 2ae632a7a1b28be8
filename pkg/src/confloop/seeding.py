"""Deterministic seed derivation.

Every stochastic step in the pipeline draws from a generator keyed by the
master seed plus a path of labels (stage name, replicate index, ...), so
results are independent of execution order and identical across runs and
machines. Python's builtin ``hash`` is salted per process and must not be
used here.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *parts: object) -> int:
    """Derive a stable 63-bit sub-seed from a master seed and label path."""
    token = repr((int(master),) + tuple(str(p) for p in parts))
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def rng_for(master: int, *parts: object) -> np.random.Generator:
    """Generator seeded by :func:`derive_seed` of the given path."""
    return np.random.default_rng(derive_seed(master, *parts))

"""Deterministic named random streams.

All randomness flows from one root seed through named sub-streams (data,
cameras, noise, dropout, ...) so individual stages can be replayed in
isolation.  Names are hashed with sha256, never Python hash(), to keep the
mapping stable across processes.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(root_seed: int, name: str) -> np.random.Generator:
    """Generator for the named sub-stream of a root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), _name_key(name)]))

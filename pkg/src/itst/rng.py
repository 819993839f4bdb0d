"""Named deterministic random streams.

Every stochastic choice in the package (parameter init, sample synthesis,
dropout masks, batch order, search proposals) draws from its own named
stream so that runs are reproducible and sub-streams stay independent:
adding or removing one consumer never shifts the draws seen by another.

A stream is keyed by a 64-bit seed plus a path of string/int scope parts.
The path is hashed with SHA-256 into entropy words for ``SeedSequence``,
which drives a PCG64 generator.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["named_stream"]

_MASK64 = (1 << 64) - 1


def named_stream(seed: int, *scope: str | int) -> np.random.Generator:
    """Return the PCG64 generator for ``seed`` at the given scope path."""
    path = "/".join(str(part) for part in scope)
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 8], "little") for i in range(0, 32, 8)]
    seq = np.random.SeedSequence([int(seed) & _MASK64, *words])
    return np.random.Generator(np.random.PCG64(seq))

"""Counter-based random substreams.

Every draw in a simulation comes from a stream keyed by
``(master_seed, replication, purpose)``, so the numbers a replication sees
do not depend on how replications are scheduled across workers.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"substream keys must be non-negative, got {part}")
    return int(part)


def substream(master_seed: int, *keys: int | str) -> np.random.Generator:
    """Return an independent Philox generator for ``(master_seed, *keys)``.

    String keys are purpose tags (``"train"``, ``"test"``) and are hashed
    with CRC32; integer keys are used as-is.
    """
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))

"""Named, counter-based random substreams.

Every stochastic component draws from ``substream(root_seed, *names)``; the
names are hashed with CRC32 into a ``SeedSequence`` spawn key and fed to a
Philox generator, so streams are independent, order-insensitive and stable
across platforms and numpy versions.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_part(name) -> int:
    if isinstance(name, (int, np.integer)):
        if name < 0:
            raise ValueError(f"negative stream key {name}")
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


def substream(root_seed: int, *names) -> np.random.Generator:
    seq = np.random.SeedSequence(
        entropy=int(root_seed), spawn_key=tuple(_key_part(n) for n in names)
    )
    return np.random.Generator(np.random.Philox(seq))

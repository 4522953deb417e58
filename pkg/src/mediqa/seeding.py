"""Named deterministic RNG substreams derived from a single run seed."""

import hashlib

import numpy as np


def substream(seed: int, *names) -> np.random.Generator:
    """Return an independent generator for (seed, names).

    Every source of randomness in the package draws from one of these, so a
    run is reproducible from its seed and components can be reproduced in
    isolation. Name hashing uses blake2b, not Python's hash(), so streams
    are stable across processes.
    """
    key = [int(seed) % (2 ** 63)]
    for name in names:
        digest = hashlib.blake2b(str(name).encode("utf-8"), digest_size=8).digest()
        key.append(int.from_bytes(digest, "little"))
    return np.random.default_rng(key)

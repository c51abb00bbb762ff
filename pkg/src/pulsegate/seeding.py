"""Named random substreams derived from one global seed."""

import hashlib

import numpy as np


def _key(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream_seed(seed, *names):
    """Deterministic 64-bit seed for the stream ``seed/names[0]/names[1]/...``."""
    ss = np.random.SeedSequence([_key(seed)] + [_key(n) for n in names])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def substream(seed, *names):
    return np.random.default_rng(substream_seed(seed, *names))

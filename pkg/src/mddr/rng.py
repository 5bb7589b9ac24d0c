"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by a
tuple of non-negative integers (global seed, purpose tag, step, ...). Two
calls with the same key return identical streams regardless of call order
or thread, which is what makes chains reproducible across worker counts.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

Key = Union[int, Sequence[int]]

# purpose tags, appended after the global seed
TAG_SOLVER = 1
TAG_SOLVER_INIT = 2
TAG_HOLDOUT = 3
TAG_LIKELIHOOD = 4
TAG_MALA = 5
TAG_EVAL = 6
TAG_SIMULATE = 7
TAG_INIT_PARAMS = 8


def as_key(key: Key) -> tuple[int, ...]:
    if isinstance(key, (int, np.integer)):
        key = (int(key),)
    out = tuple(int(k) for k in key)
    if not out:
        raise ValueError("stream key must not be empty")
    if any(k < 0 for k in out):
        raise ValueError(f"stream key entries must be non-negative, got {out}")
    return out


def stream(key: Key, *extra: int) -> np.random.Generator:
    """Return the generator for ``key`` extended by ``extra``."""
    entropy = as_key(key) + tuple(int(e) for e in extra)
    # length prefix: SeedSequence ignores trailing zero words otherwise
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([len(entropy), *entropy])))

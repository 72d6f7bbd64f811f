"""Counter-based random streams.

Every Monte Carlo draw gets its own Philox generator keyed by
``(seed, stream, index)``, so results do not depend on how draws are
scheduled over workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

_MASK = (1 << 64) - 1


def stream(seed: int, index: int, purpose: int = 0) -> np.random.Generator:
    key = [int(seed) & _MASK, ((int(purpose) & 0xFFFFFFFF) << 32 | (int(index) & 0xFFFFFFFF))]
    return np.random.Generator(np.random.Philox(key=key))


def parallel_map(fn, items, threads: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally on a thread pool; order preserved."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))

"""Per-path random streams and order-preserving parallel map.

Every Monte Carlo path draws from its own Philox generator keyed by
``(seed, stream, path_index)``, so results do not depend on how paths
are split across workers.
"""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

# stream tags keep physical, reference and solver draws independent
CTMC = 0
OBS_NOISE = 1
REFERENCE = 2
CONTROL = 3
LSMC = 4

BATCH_SIZE = 2000


def path_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(index)))
    return np.random.Generator(np.random.Philox(ss))


def default_threads() -> int:
    env = os.environ.get("DUALSCOPE_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            n = 0
        if n > 0:
            return n
    return os.cpu_count() or 1


def batches(n_paths: int, batch_size: int = BATCH_SIZE):
    """Fixed ``(start, count)`` chunks; the split never depends on thread count."""
    return [(s, min(batch_size, n_paths - s)) for s in range(0, n_paths, batch_size)]


def map_batches(fn, n_paths: int, threads=None, batch_size: int = BATCH_SIZE):
    """Apply ``fn(start, count)`` to every chunk and return results in chunk order."""
    chunks = batches(n_paths, batch_size)
    threads = threads or default_threads()
    if threads <= 1 or len(chunks) <= 1:
        return [fn(s, c) for s, c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda sc: fn(*sc), chunks))

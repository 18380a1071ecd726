"""Per-trial random streams.

Trial ``i`` of a run seeded with ``seed`` always draws from the Philox stream
keyed by ``(seed, i)``, so results do not depend on batching or on how many
workers processed the trials.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

DEFAULT_BLOCK = 512


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(trial),))
    return np.random.Generator(np.random.Philox(ss))


def trial_rngs(seed: int, trials) -> list[np.random.Generator]:
    return [trial_rng(seed, i) for i in trials]


def map_blocks(fn, n_trials: int, threads: int = 1, block: int = DEFAULT_BLOCK):
    """Run ``fn(trial_indices)`` over fixed blocks; results come back in block order."""
    blocks = [np.arange(s, min(s + block, n_trials)) for s in range(0, n_trials, block)]
    if threads <= 1 or len(blocks) <= 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, blocks))

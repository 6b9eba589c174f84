"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
(seed, purpose, index). A batch of samples therefore has the same values no
matter how many workers produce it or in which order they finish.
"""

from __future__ import annotations

import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

BATCH = 4096


def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _tag(purpose), int(index)])
    return np.random.Generator(np.random.Philox(ss))


def batch_sizes(n: int, batch: int = BATCH) -> list[int]:
    full, rest = divmod(int(n), batch)
    return [batch] * full + ([rest] if rest else [])


def map_batches(
    fn: Callable[[np.random.Generator, int, int], object],
    n: int,
    seed: int,
    purpose: str,
    threads: int = 1,
    batch: int = BATCH,
) -> list:
    """Run fn(rng, batch_index, size) over the batches, results in batch order."""
    sizes = batch_sizes(n, batch)
    jobs = [(stream(seed, purpose, i), i, s) for i, s in enumerate(sizes)]
    if threads <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


def resolve_seed(seed: int) -> int:
    """SUBRIFT_SEED in the environment overrides the configured seed."""
    env = os.environ.get("SUBRIFT_SEED")
    return int(env) if env not in (None, "") else int(seed)


def concat(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(list(parts), axis=0) if parts else np.empty((0,))

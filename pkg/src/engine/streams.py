"""
Random streams for path blocks.

Paths are grouped in fixed-size blocks and every block owns an independent
Philox stream keyed by (seed, block index). A block is always simulated by a
single worker, so the numbers a path sees depend on the seed, its index and
the block size, never on how many workers ran the job. Changing block_size
regroups the paths and changes the draws; output stanzas record it.
"""
import math
from typing import Iterator, Tuple

import numpy as np


def block_generator(seed: int, block_index: int) -> np.random.Generator:
    sequence = np.random.SeedSequence(seed, spawn_key=(block_index,))
    return np.random.Generator(np.random.Philox(sequence))


def block_count(n_paths: int, block_size: int) -> int:
    return int(math.ceil(n_paths / block_size))


def block_ranges(n_paths: int, block_size: int) -> Iterator[Tuple[int, int, int]]:
    """Yield (block_index, start, stop) covering path indices [0, n_paths)."""
    for index in range(block_count(n_paths, block_size)):
        start = index * block_size
        yield index, start, min(start + block_size, n_paths)

"""Seed streams and ordered parallel maps.

Every random quantity is drawn from ``SeedSequence(seed, spawn_key=(stream, *index))``
so that paths, initial draws and control sampling can be varied independently,
and the value drawn for a given index never depends on how work is scheduled.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

import numpy as np

PATH_STREAM = 0
RESTART_STREAM = 1
DRAW_STREAM = 2
CONTROL_STREAM = 3
SAMPLING_STREAM = 4

T = TypeVar("T")
R = TypeVar("R")


def rng_for(seed: int, stream: int, *index: int) -> np.random.Generator:
    key = (int(stream),) + tuple(int(i) for i in index)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def ordered_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    """Map ``fn`` over ``items``, returning results in input order.

    With ``workers > 1`` the calls run on a thread pool; results are still
    collected in input order, so downstream folds see the same sequence.
    """
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=int(workers)) as pool:
        return list(pool.map(fn, items))

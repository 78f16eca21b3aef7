from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

import os

T = TypeVar('T')
R = TypeVar('R')

THREADS_ENV = 'FDP_THREADS'


def resolve_threads(threads: Optional[int] = None) -> int:
    '''
    Worker count: the explicit value, else $FDP_THREADS, else the number of
    available CPUs.
    '''
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ValueError(f'{THREADS_ENV} must be an integer, got {env!r}')
        else:
            threads = os.cpu_count() or 1

    if threads < 1:
        raise ValueError(f'thread count must be >= 1, got {threads}')
    return threads


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: Optional[int] = 1) -> List[R]:
    '''
    Maps fn over items on a thread pool. Results come back in input order,
    so any reduction over them is deterministic.
    '''
    items = list(items)
    threads = resolve_threads(threads)
    if threads == 1 or len(items) <= 1:
        return [fn(item) for item in items]

    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def to_unit_range(image):
    '''
    Min-max scales an array to [0, 1]; a constant array maps to zeros.
    '''
    low, high = image.min(), image.max()
    if high - low <= 0:
        return image * 0.0
    return (image - low) / (high - low)

"""Bounded, order-preserving worker pool for data-parallel numeric work.

Work items are dispatched to threads through asyncio with a semaphore cap;
results come back in input order so reductions stay deterministic whatever
the thread count.
"""

from __future__ import annotations

import asyncio
import logging
import os
from collections.abc import Callable, Sequence
from typing import TypeVar

log = logging.getLogger(__name__)

THREADS_ENV = "TOOTHFUSE_THREADS"

_DEFAULT_THREADS = 1

T = TypeVar("T")
R = TypeVar("R")


def thread_count() -> int:
    """Worker count from the environment (default 1 = single-threaded, bitwise reproducible)."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return _DEFAULT_THREADS
    try:
        n = int(raw)
    except ValueError:
        log.warning("Ignoring non-integer %s=%r", THREADS_ENV, raw)
        return _DEFAULT_THREADS
    return max(1, n)


async def _run_one(fn: Callable[[T], R], item: T, semaphore: asyncio.Semaphore) -> R:
    async with semaphore:
        return await asyncio.to_thread(fn, item)


async def _map_ordered_async(fn: Callable[[T], R], items: Sequence[T], limit: int) -> list[R]:
    semaphore = asyncio.Semaphore(limit)
    tasks = [_run_one(fn, item, semaphore) for item in items]
    return list(await asyncio.gather(*tasks))


def map_ordered(fn: Callable[[T], R], items: Sequence[T], threads: int | None = None) -> list[R]:
    """Apply fn to every item, at most ``threads`` at a time, results in input order."""
    limit = thread_count() if threads is None else max(1, threads)
    if limit == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    return asyncio.run(_map_ordered_async(fn, items, limit))


def chunk_ranges(n: int, chunk: int) -> list[tuple[int, int]]:
    """Half-open [start, stop) ranges covering 0..n in steps of ``chunk``."""
    return [(start, min(start + chunk, n)) for start in range(0, n, chunk)]

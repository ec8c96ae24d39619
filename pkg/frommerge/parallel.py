"""Per-layer fan-out shared by the merge routines."""

import logging
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

from frommerge.errors import ValidationError

# Configure logging
logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def map_layers(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """
    Apply fn to every item, optionally on a thread pool.

    Results come back in input order, so callers see the same output for
    every thread count as long as fn itself is pure.

    Args:
        fn: Per-item function
        items: Work items, typically layer names
        threads: Worker count; 1 runs inline

    Returns:
        List of results in input order
    """
    if threads < 1:
        raise ValidationError(f"threads must be >= 1, got {threads}")
    work = list(items)
    if threads == 1 or len(work) <= 1:
        return [fn(item) for item in work]
    logger.debug("Fanning out %d items over %d threads", len(work), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, work))

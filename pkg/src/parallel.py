import logging
import os
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor

logger = logging.getLogger("volprint")


def default_threads() -> int:
    """Worker cap from VP_THREADS, falling back to 1."""
    value = os.getenv("VP_THREADS")
    if not value:
        return 1
    try:
        return max(1, int(value))
    except ValueError:
        logger.warning(f"Ignoring non-integer VP_THREADS={value!r}")
        return 1


def parallel_map[T, R](
    fn: Callable[[T], R], items: Iterable[T], threads: int = 1
) -> list[R]:
    """Apply fn to items on a thread pool, returning results in input order."""
    work = list(items)
    if threads <= 1 or len(work) <= 1:
        return [fn(item) for item in work]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(fn, work))

"""
Ordered work pool for per-subject and per-target tasks.

Results come back in input order whatever the completion order, so a run with
one worker and a run with many produce identical outputs.
"""
from concurrent.futures import ThreadPoolExecutor
import logging
import os

logger = logging.getLogger(__name__)


def default_workers():
    return os.cpu_count() or 1


def map_ordered(func, items, workers=1):
    items = list(items)
    workers = max(1, min(int(workers or 1), len(items) or 1))
    if workers == 1:
        return [func(item) for item in items]
    logger.debug("dispatching %d tasks to %d workers", len(items), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def map_isolated(func, items, workers=1):
    """
    Like ``map_ordered`` but a failing task does not stop the others: returns a
    list of (result, error) pairs with exactly one of them set.
    """
    def guarded(item):
        try:
            return func(item), None
        except Exception as error:  # noqa: BLE001 - reported per task
            return None, error

    return map_ordered(guarded, items, workers)

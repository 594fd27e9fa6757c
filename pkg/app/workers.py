# workers.py
"""
Index-ordered parallel map.

Work is cut into chunks by sample index; chunks may run on any thread but the
results come back in chunk order, so any reduction done afterwards is the
same sum in the same order whatever the worker count.
"""

import logging
from concurrent.futures import ThreadPoolExecutor

DEFAULT_CHUNK = 2048


def chunk_bounds(n_items, chunk_size=DEFAULT_CHUNK):
    """Half-open [start, stop) index ranges covering range(n_items)."""
    chunk_size = max(1, int(chunk_size))
    return [(start, min(start + chunk_size, n_items)) for start in range(0, n_items, chunk_size)]


def indexed_map(fn, bounds, workers=1):
    """
    Apply fn(start, stop) to every chunk and return the results in chunk order.
    """
    if workers is None or workers <= 1 or len(bounds) <= 1:
        return [fn(start, stop) for start, stop in bounds]

    logging.debug("Dispatching %d chunks to %d workers", len(bounds), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, start, stop) for start, stop in bounds]
        return [future.result() for future in futures]

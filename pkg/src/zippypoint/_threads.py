"""Thread-count policy and a deterministic chunked map.

ZIPPY_THREADS caps worker threads package-wide. Work is always split into
the same chunks and results land in caller-preallocated slots, so outputs
are identical whatever the thread count.
"""

import os
from concurrent.futures import ThreadPoolExecutor

from .errors import InvalidParameterError


def thread_count(override=None) -> int:
    if override is not None:
        n = int(override)
        if n < 1:
            raise InvalidParameterError(f"thread count must be >= 1, got {n}")
        return n
    env = os.environ.get("ZIPPY_THREADS")
    if env is not None:
        try:
            n = int(env)
        except ValueError:
            raise InvalidParameterError(f"ZIPPY_THREADS must be an integer, got {env!r}")
        if n < 1:
            raise InvalidParameterError(f"ZIPPY_THREADS must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


def run_chunks(fn, n_items: int, chunk: int, threads: int):
    """Apply fn(start, stop) over fixed chunk boundaries, possibly threaded."""
    spans = [(s, min(s + chunk, n_items)) for s in range(0, n_items, chunk)]
    if threads <= 1 or len(spans) <= 1:
        for s, e in spans:
            fn(s, e)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, s, e) for s, e in spans]
        for f in futures:
            f.result()

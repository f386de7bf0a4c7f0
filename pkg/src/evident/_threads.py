"""Worker-count control for per-image parallel sections.

``EVIDENT_THREADS`` caps the worker count (0 or unset = auto).  Work items
are pure, and results are assembled in input order, so outputs never depend
on scheduling.
"""

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count(n_tasks):
    raw = os.environ.get("EVIDENT_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        cap = 0
    if cap <= 0:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_tasks))


def parallel_map(fn, items):
    items = list(items)
    if not items:
        return []
    workers = worker_count(len(items))
    if workers == 1 or len(items) == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))

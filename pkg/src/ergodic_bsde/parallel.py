"""Path-chunked worker pool with a determinism contract.

Results never depend on the worker count: chunk boundaries are fixed
constants, every chunk is an independent pure computation, and
reductions happen in chunk order after all chunks complete.  The
``--threads`` option of the experiment runner only caps concurrency.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

# fixed chunk width: part of the reproducibility contract, do not derive
# from the worker count
PATH_CHUNK = 16384

_max_workers = 1


def set_max_workers(n: int) -> None:
    global _max_workers
    _max_workers = max(1, int(n))


def get_max_workers() -> int:
    return _max_workers


def chunk_ranges(n_items: int, chunk: int = PATH_CHUNK):
    """Half-open ranges [(lo, hi), ...] covering 0..n_items."""
    return [(lo, min(lo + chunk, n_items)) for lo in range(0, n_items, chunk)]


def map_chunks(fn, n_items: int, chunk: int = PATH_CHUNK) -> list:
    """Apply ``fn(lo, hi)`` to every chunk, results in chunk order.

    With more than one worker the chunks run on a thread pool; numpy
    releases the GIL in its kernels so this overlaps real work.  The
    returned list is ordered by chunk index regardless of completion
    order, so fixed-order reductions stay bit-reproducible.
    """
    ranges = chunk_ranges(n_items, chunk)
    if _max_workers == 1 or len(ranges) == 1:
        return [fn(lo, hi) for lo, hi in ranges]
    with ThreadPoolExecutor(max_workers=_max_workers) as pool:
        futures = [pool.submit(fn, lo, hi) for lo, hi in ranges]
        return [f.result() for f in futures]

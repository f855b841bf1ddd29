"""Worker-count control for the numba kernels.

The numba pool size is fixed at first import, so it is raised here to at least 8
before numba loads; ``set_threads`` then picks how many of those workers run.
Outputs never depend on the worker count.
"""

import os
import warnings

os.environ.setdefault("NUMBA_NUM_THREADS", str(max(os.cpu_count() or 1, 8)))
warnings.filterwarnings("ignore", message=".*TBB threading layer.*")

import numba  # noqa: E402


def max_threads() -> int:
    return numba.config.NUMBA_NUM_THREADS


def set_threads(n: int | None) -> int:
    """Use ``n`` workers (None or 0 means all cores); returns the count in effect."""
    if not n:
        n = os.cpu_count() or 1
    n = max(1, min(int(n), max_threads()))
    numba.set_num_threads(n)
    return n


def get_threads() -> int:
    return numba.get_num_threads()

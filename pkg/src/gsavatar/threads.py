"""Thread-count control for the numba kernels.

Parallel sections are structured so that results are bitwise identical for
any thread count: work is split into fixed-size chunks (tiles, primitives)
whose partial results are merged in a fixed order.  Requesting more threads
than numba was launched with silently caps at the launch-time maximum.
"""

import numba

_requested = 1


def set_num_threads(n: int) -> int:
    """Set the kernel thread count; returns the count actually applied."""
    global _requested
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    applied = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(applied)
    _requested = applied
    return applied


def get_num_threads() -> int:
    return _requested

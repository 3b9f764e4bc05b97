"""Process-level settings for reproducible, allocation-friendly runs."""
from __future__ import annotations

import contextlib
import ctypes
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator() -> bool:
    """Keeps freed large blocks in the glibc heap so big temporaries skip fresh page faults.

    Returns False where glibc is unavailable.
    """
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return False
    ok = libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30) and libc.mallopt(_M_TRIM_THRESHOLD, 2**31 - 1)
    return bool(ok)


@contextlib.contextmanager
def fixed_threading(threads: int = 1):
    """Pins BLAS to a fixed thread count so reductions run in a fixed order."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        yield

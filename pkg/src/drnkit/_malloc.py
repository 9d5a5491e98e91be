"""Glibc allocator tuning for large-array workloads.

Training allocates and frees many multi-megabyte temporaries. With default
glibc settings those land in fresh mmap regions, so every reuse pays
first-touch page faults (measured ~5x slowdown on the training loop).
Raising the mmap/trim thresholds keeps freed blocks cached on the heap.
Set DRNKIT_NO_MALLOC_TUNING=1 to skip this.
"""

from __future__ import annotations

import ctypes
import os
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_malloc_for_large_arrays() -> bool:
    if os.environ.get("DRNKIT_NO_MALLOC_TUNING"):
        return False
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)
        return True
    except OSError:
        return False

"""Numeric kernels with backend selection.

Imports the compiled Cython extension when available; otherwise falls back
to the numpy reference implementation. ``DYGENC_PURE_PY=1`` forces the
fallback (used by the kernel benchmark and by tests that compare backends).
Both backends accumulate in identical element order.
"""

import os

from . import pyref

if os.environ.get("DYGENC_PURE_PY") == "1":
    _backend = pyref
else:
    try:
        from . import _speedups as _backend
    except ImportError:
        _backend = pyref

IMPL = _backend.IMPL

scatter_add_rows = _backend.scatter_add_rows
segment_sum = _backend.segment_sum
segment_max = _backend.segment_max

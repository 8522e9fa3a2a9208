"""Pure-numpy reference kernels.

Semantics are the contract for the compiled twin in ``_speedups.pyx``:
row accumulation happens in increasing element order, so results match the
compiled path bit-for-bit on the same inputs.
"""

import numpy as np

IMPL = "python"


def scatter_add_rows(out, index, src):
    """out[index[e], :] += src[e, :] for e in range(len(index))."""
    np.add.at(out, index, src)
    return out


def segment_sum(values, seg, n_seg):
    """Row-wise sums of ``values`` grouped by segment id. Empty segments are 0."""
    out = np.zeros((n_seg, values.shape[1]), dtype=values.dtype)
    np.add.at(out, seg, values)
    return out


def segment_max(values, seg, n_seg):
    """Row-wise maxima grouped by segment id. Empty segments are -inf."""
    out = np.full((n_seg, values.shape[1]), -np.inf, dtype=values.dtype)
    np.maximum.at(out, seg, values)
    return out

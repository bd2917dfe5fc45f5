"""Translation-discrepancy kernel and the trigger objective.

A trigger ``delta`` is translation sensitive when its shifted copies differ
strongly from it. Averaging ``||T_{m,n}(delta) - delta||_1`` over the offset
grid ``[-v, v]^2`` is bounded below by ``||K(v) * delta||_1 / (2v+1)^2`` where
``K(v)`` has ``(2v+1)^2 - 1`` at the centre and ``-1`` elsewhere. Under zero-fill
translation and same-size zero-padded convolution the sum of the shifted
differences *equals* ``K(v) * delta`` elementwise, which the brute-force
helpers below let us check numerically.
"""

import itertools

import numpy as np
from scipy.signal import convolve2d

from ._validation import DegenerateTriggerError, check_half_width, check_pattern

__all__ = [
    "build_kernel",
    "translate",
    "offsets",
    "brute_force_discrepancy",
    "shift_difference_sum",
    "convolve_kernel",
    "conv_objective",
    "trigger_loss",
]


def build_kernel(v):
    """Return the ``(2v+1) x (2v+1)`` discrepancy kernel."""
    v = check_half_width(v)
    size = 2 * v + 1
    kernel = -np.ones((size, size), dtype=np.float64)
    kernel[v, v] = size * size - 1
    return kernel


def _as_hwc(delta):
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim == 2:
        return delta[:, :, None], True
    if delta.ndim != 3:
        raise ValueError(f"pattern must be H×W or H×W×C, got shape {delta.shape}")
    return delta, False


def translate(delta, offset):
    """Shift ``delta`` by ``offset=(m, n)`` rows/cols with zero fill.

    ``out[i, j] = delta[i - m, j - n]`` when in bounds, else 0. Accepts H×W or
    H×W×C arrays and returns the same shape.
    """
    m, n = (int(o) for o in offset)
    arr = np.asarray(delta)
    out = np.zeros_like(arr, dtype=np.result_type(arr.dtype, np.float64))
    h, w = arr.shape[:2]
    if abs(m) >= h or abs(n) >= w:
        return out
    src_r = slice(max(0, -m), h - max(0, m))
    dst_r = slice(max(0, m), h - max(0, -m))
    src_c = slice(max(0, -n), w - max(0, n))
    dst_c = slice(max(0, n), w - max(0, -n))
    out[dst_r, dst_c] = arr[src_r, src_c]
    return out


def offsets(v):
    """All ``(m, n)`` in ``[-v, v]^2`` in row-major order."""
    v = check_half_width(v)
    rng = range(-v, v + 1)
    return list(itertools.product(rng, rng))


def shift_difference_sum(delta, v):
    """Brute-force ``sum_{m,n} (delta - T_{m,n} delta)`` (same shape as delta)."""
    delta = np.asarray(delta, dtype=np.float64)
    total = np.zeros_like(delta)
    for off in offsets(v):
        total += delta - translate(delta, off)
    return total


def brute_force_discrepancy(delta, v):
    """Mean L1 distance between ``delta`` and its shifts over ``[-v, v]^2``."""
    delta = np.asarray(delta, dtype=np.float64)
    grid = offsets(v)
    total = sum(np.abs(translate(delta, off) - delta).sum() for off in grid)
    return float(total / len(grid))


def convolve_kernel(delta, v, kernel=None):
    """Same-size zero-padded convolution of each channel with ``K(v)``."""
    v = check_half_width(v)
    if kernel is None:
        kernel = build_kernel(v)
    arr, squeeze = _as_hwc(delta)
    h, w = arr.shape[:2]
    size = 2 * v + 1
    if h < size or w < size:
        raise ValueError(
            f"pattern spatial size {h}x{w} is smaller than the {size}x{size} kernel"
        )
    out = np.empty_like(arr)
    for c in range(arr.shape[2]):
        out[:, :, c] = convolve2d(arr[:, :, c], kernel, mode="same", boundary="fill")
    return out[:, :, 0] if squeeze else out


def conv_objective(delta, v):
    """``||K(v) * delta||_1`` summed over channels."""
    return float(np.abs(convolve_kernel(delta, v)).sum())


def trigger_loss(delta, v):
    """``-log ||K(v) * delta||_1``; raises on a degenerate (zero) objective."""
    check_pattern(delta)
    objective = conv_objective(delta, v)
    if objective <= 0.0:
        raise DegenerateTriggerError("trigger has zero discrepancy objective")
    return -float(np.log(objective))

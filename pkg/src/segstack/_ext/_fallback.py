"""Pure-numpy implementations of the hot kernels.

Used when the compiled extension is unavailable (or forced off via the
SEGSTACK_FORCE_FALLBACK environment variable). Same contracts as
segstack._ext._core.
"""

import numpy as np

IMPLEMENTATION = "fallback"

_CHUNK = 2048


def _window_sums(arr, width, axis):
    """Sums over sliding windows of `width` along `axis` via cumulative sums."""
    csum = np.cumsum(arr, axis=axis, dtype=np.float64)
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (1, 0)
    csum = np.pad(csum, pad)
    lead = [slice(None)] * arr.ndim
    trail = [slice(None)] * arr.ndim
    lead[axis] = slice(width, None)
    trail[axis] = slice(None, -width)
    return csum[tuple(lead)] - csum[tuple(trail)]


def patch_moments(data, radius):
    """Per-channel mean and variance over the (2r+1)^2 patch at each pixel.

    Patches are clamped to the image edge. `data` is a (C, H, W) float32
    array; returns (mean, variance), both (C, H, W) float32.
    """
    data = np.ascontiguousarray(data, dtype=np.float32)
    if radius == 0:
        return data.copy(), np.zeros_like(data)
    width = 2 * radius + 1
    padded = np.pad(data, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    s1 = _window_sums(_window_sums(padded, width, 1), width, 2)
    s2 = _window_sums(_window_sums(np.square(padded, dtype=np.float64), width, 1), width, 2)
    count = float(width * width)
    mean = s1 / count
    var = np.maximum(s2 / count - mean * mean, 0.0)
    return mean.astype(np.float32), var.astype(np.float32)


def directed_avg_distance(points_a, points_b):
    """Mean over a in A of the Euclidean distance to the nearest b in B.

    Both inputs are (n, 2) float64 coordinate arrays and must be non-empty.
    Squared distances are computed in float64; for integer-valued pixel
    coordinates they are exact, so per-point minima agree with the
    compiled kernel to the last bit (the final mean only differs by
    summation rounding).
    """
    a = np.ascontiguousarray(points_a, dtype=np.float64)
    b = np.ascontiguousarray(points_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("directed_avg_distance requires non-empty point sets")
    bb = np.einsum("ij,ij->i", b, b)
    total = 0.0
    for start in range(0, a.shape[0], _CHUNK):
        chunk = a[start:start + _CHUNK]
        d2 = np.einsum("ij,ij->i", chunk, chunk)[:, None] + bb[None, :] - 2.0 * (chunk @ b.T)
        total += np.sqrt(np.maximum(d2.min(axis=1), 0.0)).sum()
    return total / a.shape[0]

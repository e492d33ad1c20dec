"""Slow reference implementations used to check the fast kernels.

Nothing here imports the kernel code: sample coordinates, clamping and
interpolation are all derived again from the written definition.
"""
from __future__ import annotations

import numpy as np


def _tent_weights(coords: np.ndarray, size: int) -> np.ndarray:
    """Interpolation weight of every grid node for every coordinate.

    Coordinates are clamped into ``[0, size-1]`` first; the weight of node
    ``j`` is then ``max(0, 1 - |c - j|)``. Shape ``(len(coords), size)``.
    """
    c = np.clip(np.asarray(coords, dtype=np.float64), 0.0, size - 1.0)
    nodes = np.arange(size, dtype=np.float64)
    return np.maximum(0.0, 1.0 - np.abs(c[:, None] - nodes[None, :]))


def _bin_sample_coords(lo: float, hi: float, bins: int, per_bin: int) -> np.ndarray:
    """Midpoints of ``per_bin`` equal sub-cells of each of ``bins`` bins.

    Returns shape ``(bins, per_bin)``.
    """
    out = np.empty((bins, per_bin))
    bin_size = (hi - lo) / bins
    for p in range(bins):
        for k in range(per_bin):
            out[p, k] = lo + p * bin_size + (k + 0.5) * bin_size / per_bin
    return out


def _box_on_grid(fm, box, img_w, img_h):
    _, h, w = fm.shape
    sx, sy = w / img_w, h / img_h
    x1, y1, x2, y2 = box
    return x1 * sx - 0.5, y1 * sy - 0.5, x2 * sx - 0.5, y2 * sy - 0.5


def roi_align_points(fm, box, img_w, img_h, pool, samples):
    """RoIAlign evaluated sample by sample with full tent-kernel sums.

    ``fm`` is ``C x H x W``; returns ``pool x pool x C``. Each output bin is
    the mean over ``samples x samples`` interpolated points.
    """
    fm = np.asarray(fm, dtype=np.float64)
    c, h, w = fm.shape
    x1, y1, x2, y2 = _box_on_grid(fm, box, img_w, img_h)
    ys = _bin_sample_coords(y1, y2, pool, samples)
    xs = _bin_sample_coords(x1, x2, pool, samples)
    out = np.zeros((pool, pool, c))
    for py in range(pool):
        wy = _tent_weights(ys[py], h)  # (samples, H)
        for px in range(pool):
            wx = _tent_weights(xs[px], w)  # (samples, W)
            # sum over every (sy, sx) sample of  sum_ij wy[sy,i] wx[sx,j] fm[:, i, j]
            vals = np.einsum("ai,bj,cij->abc", wy, wx, fm)
            out[py, px] = vals.reshape(-1, c).mean(axis=0)
    return out


def roi_align_dense(fm, box, img_w, img_h, pool, density=64):
    """Average of the clamped bilinear field over each bin.

    Approximated by ``density x density`` midpoint samples per bin, which is
    the bin integral of the interpolated field up to O(1/density^2).
    """
    return roi_align_points(fm, box, img_w, img_h, pool, density)


def bilinear_resize_reference(x, out_h, out_w):
    """Half-pixel bilinear resize of a ``C x H x W`` array, one pixel at a time."""
    x = np.asarray(x, dtype=np.float64)
    c, h, w = x.shape
    out = np.zeros((c, out_h, out_w))
    for oy in range(out_h):
        sy = min(max((oy + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
        wy = np.maximum(0.0, 1.0 - np.abs(sy - np.arange(h)))
        for ox in range(out_w):
            sx = min(max((ox + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
            wx = np.maximum(0.0, 1.0 - np.abs(sx - np.arange(w)))
            out[:, oy, ox] = np.einsum("i,j,cij->c", wy, wx, x)
    return out


def softmax_cross_entropy(logits, target):
    """Cross-entropy of one logit row against one class index."""
    logits = [float(v) for v in logits]
    m = max(logits)
    z = sum(np.exp(v - m) for v in logits)
    return -(logits[target] - m - np.log(z))

"""Pure-numpy fallback kernels.

Traversal here works differently from the jitted backend on purpose: instead
of stepping voxel to voxel it collects every axis-plane crossing inside the
clipped ray interval, sorts them, and reads the voxel of each segment off its
midpoint. Agreement between the two backends is therefore a meaningful check
of both.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def _clip_to_grid(p0, direction, lo, spacing, dims):
    t0, t1 = 0.0, np.inf
    for i in range(3):
        d = direction[i]
        lo_i = lo[i]
        hi_i = lo[i] + dims[i] * spacing[i]
        if d != 0.0:
            ta = (lo_i - p0[i]) / d
            tb = (hi_i - p0[i]) / d
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
        elif p0[i] < lo_i or p0[i] > hi_i:
            return 1.0, 0.0
    return t0, t1


def traverse_ray(p0, direction, lo, spacing, dims):
    """Ordered (indices, lengths) of voxels the ray crosses inside the grid."""
    p0 = np.asarray(p0, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64)
    dims = np.asarray(dims, dtype=np.int64)

    t0, t1 = _clip_to_grid(p0, direction, lo, spacing, dims)
    if t1 <= t0:
        return np.empty((0, 3), dtype=np.int64), np.empty(0, dtype=np.float64)

    ts = [np.array([t0, t1])]
    for i in range(3):
        if direction[i] != 0.0:
            planes = lo[i] + np.arange(dims[i] + 1) * spacing[i]
            ti = (planes - p0[i]) / direction[i]
            ts.append(ti[(ti > t0) & (ti < t1)])
    knots = np.unique(np.concatenate(ts))

    lengths = np.diff(knots)
    mids = p0[None, :] + (0.5 * (knots[:-1] + knots[1:]))[:, None] * direction[None, :]
    idx = np.floor((mids - lo[None, :]) / spacing[None, :]).astype(np.int64)
    np.clip(idx, 0, dims - 1, out=idx)

    keep = lengths > 0.0
    idx, lengths = idx[keep], lengths[keep]
    if len(lengths) > 1:
        # Corner-grazing rays can produce sliver segments that round into the
        # same voxel twice in a row; merge them so the walk stays strictly
        # ordered, matching the stepping backend.
        fresh = np.concatenate(([True], np.any(idx[1:] != idx[:-1], axis=1)))
        if not fresh.all():
            seg_starts = np.flatnonzero(fresh)
            lengths = np.add.reduceat(lengths, seg_starts)
            idx = idx[seg_starts]
    return np.ascontiguousarray(idx), lengths


def deposit_beam(mu, lo, spacing, starts, direction, weight, ray_area, dose):
    """Accumulate exponentially attenuated dose for a bundle of parallel rays."""
    dims = np.asarray(mu.shape, dtype=np.int64)
    for r in range(starts.shape[0]):
        idx, lengths = traverse_ray(starts[r], direction, lo, spacing, dims)
        if lengths.size == 0:
            continue
        m = mu[idx[:, 0], idx[:, 1], idx[:, 2]]
        ml = m * lengths
        depth_at_entry = np.concatenate(([0.0], np.cumsum(ml)[:-1]))
        contrib = weight * m * np.exp(-depth_at_entry) * lengths * ray_area
        np.add.at(dose, (idx[:, 0], idx[:, 1], idx[:, 2]), contrib)

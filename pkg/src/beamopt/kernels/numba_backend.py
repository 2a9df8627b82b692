"""Jitted ray traversal and dose deposition (incremental grid stepping)."""

from __future__ import annotations

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True, nogil=True)
def _clip_to_grid(p0, direction, lo, spacing, dims):
    """Slab-clip a ray against the grid box; returns (t0, t1), empty if t1<=t0."""
    t0 = 0.0
    t1 = np.inf
    for i in range(3):
        d = direction[i]
        lo_i = lo[i]
        hi_i = lo[i] + dims[i] * spacing[i]
        if d != 0.0:
            ta = (lo_i - p0[i]) / d
            tb = (hi_i - p0[i]) / d
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
        elif p0[i] < lo_i or p0[i] > hi_i:
            return 1.0, 0.0
    return t0, t1


@njit(cache=True, nogil=True)
def _traverse_core(p0, direction, lo, spacing, dims, out_idx, out_len):
    """Walk the ray voxel by voxel; fills out_idx/out_len, returns the count."""
    t0, t1 = _clip_to_grid(p0, direction, lo, spacing, dims)
    if t1 <= t0:
        return 0

    # Entry voxel, clamped so on-boundary entries land inside the grid.
    ix = int(np.floor((p0[0] + t0 * direction[0] - lo[0]) / spacing[0]))
    iy = int(np.floor((p0[1] + t0 * direction[1] - lo[1]) / spacing[1]))
    iz = int(np.floor((p0[2] + t0 * direction[2] - lo[2]) / spacing[2]))
    ix = min(max(ix, 0), dims[0] - 1)
    iy = min(max(iy, 0), dims[1] - 1)
    iz = min(max(iz, 0), dims[2] - 1)

    step_x = 1 if direction[0] > 0 else (-1 if direction[0] < 0 else 0)
    step_y = 1 if direction[1] > 0 else (-1 if direction[1] < 0 else 0)
    step_z = 1 if direction[2] > 0 else (-1 if direction[2] < 0 else 0)

    if direction[0] > 0.0:
        t_max_x = (lo[0] + (ix + 1) * spacing[0] - p0[0]) / direction[0]
        t_delta_x = spacing[0] / direction[0]
    elif direction[0] < 0.0:
        t_max_x = (lo[0] + ix * spacing[0] - p0[0]) / direction[0]
        t_delta_x = -spacing[0] / direction[0]
    else:
        t_max_x = np.inf
        t_delta_x = np.inf
    if direction[1] > 0.0:
        t_max_y = (lo[1] + (iy + 1) * spacing[1] - p0[1]) / direction[1]
        t_delta_y = spacing[1] / direction[1]
    elif direction[1] < 0.0:
        t_max_y = (lo[1] + iy * spacing[1] - p0[1]) / direction[1]
        t_delta_y = -spacing[1] / direction[1]
    else:
        t_max_y = np.inf
        t_delta_y = np.inf
    if direction[2] > 0.0:
        t_max_z = (lo[2] + (iz + 1) * spacing[2] - p0[2]) / direction[2]
        t_delta_z = spacing[2] / direction[2]
    elif direction[2] < 0.0:
        t_max_z = (lo[2] + iz * spacing[2] - p0[2]) / direction[2]
        t_delta_z = -spacing[2] / direction[2]
    else:
        t_max_z = np.inf
        t_delta_z = np.inf

    count = 0
    t = t0
    while True:
        # Next boundary crossing and the axis it belongs to.
        t_next = t_max_x
        axis = 0
        if t_max_y < t_next:
            t_next = t_max_y
            axis = 1
        if t_max_z < t_next:
            t_next = t_max_z
            axis = 2

        seg_end = t_next if t_next < t1 else t1
        length = seg_end - t
        if length > 0.0:
            out_idx[count, 0] = ix
            out_idx[count, 1] = iy
            out_idx[count, 2] = iz
            out_len[count] = length
            count += 1

        if t_next >= t1:
            break
        if axis == 0:
            ix += step_x
            if ix < 0 or ix >= dims[0]:
                break
            t_max_x += t_delta_x
        elif axis == 1:
            iy += step_y
            if iy < 0 or iy >= dims[1]:
                break
            t_max_y += t_delta_y
        else:
            iz += step_z
            if iz < 0 or iz >= dims[2]:
                break
            t_max_z += t_delta_z
        t = t_next
    return count


def traverse_ray(p0, direction, lo, spacing, dims):
    """Ordered (indices, lengths) of voxels the ray crosses inside the grid."""
    p0 = np.ascontiguousarray(p0, dtype=np.float64)
    direction = np.ascontiguousarray(direction, dtype=np.float64)
    lo = np.ascontiguousarray(lo, dtype=np.float64)
    spacing = np.ascontiguousarray(spacing, dtype=np.float64)
    dims = np.ascontiguousarray(dims, dtype=np.int64)
    cap = int(dims.sum()) + 3
    out_idx = np.empty((cap, 3), dtype=np.int64)
    out_len = np.empty(cap, dtype=np.float64)
    n = _traverse_core(p0, direction, lo, spacing, dims, out_idx, out_len)
    return out_idx[:n].copy(), out_len[:n].copy()


@njit(cache=True, nogil=True)
def deposit_beam(mu, lo, spacing, starts, direction, weight, ray_area, dose):
    """Accumulate exponentially attenuated dose for a bundle of parallel rays.

    Each crossed voxel v picks up weight * mu[v] * exp(-depth) * length *
    ray_area, where depth is the radiological depth accumulated over the
    segments upstream of v.
    """
    dims = np.empty(3, dtype=np.int64)
    dims[0] = mu.shape[0]
    dims[1] = mu.shape[1]
    dims[2] = mu.shape[2]
    cap = dims[0] + dims[1] + dims[2] + 3
    out_idx = np.empty((cap, 3), dtype=np.int64)
    out_len = np.empty(cap, dtype=np.float64)
    for r in range(starts.shape[0]):
        n = _traverse_core(starts[r], direction, lo, spacing, dims, out_idx, out_len)
        depth = 0.0
        for k in range(n):
            ix = out_idx[k, 0]
            iy = out_idx[k, 1]
            iz = out_idx[k, 2]
            length = out_len[k]
            m = mu[ix, iy, iz]
            dose[ix, iy, iz] += weight * m * np.exp(-depth) * length * ray_area
            depth += m * length

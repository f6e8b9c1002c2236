"""Marching-cubes style edge points from corner grids.

Only the edge-crossing stage is implemented: one point per qualifying lattice
edge at the linear zero crossing. This is the step where grid methods pick up
interpolation error, so it is all that is needed for a point-level comparison.
"""

from __future__ import annotations

import numpy as np

from .field import ScalarFieldGrid
from .grid import GridSpec


def _edge_points(grid: GridSpec, axis: int, lo_idx: tuple[np.ndarray, ...], t: np.ndarray) -> np.ndarray:
    c = grid.coords
    pts = np.stack([c[lo_idx[0]], c[lo_idx[1]], c[lo_idx[2]]], axis=1)
    pts[:, axis] += t * grid.spacing
    return pts


def _pairs(values: np.ndarray, axis: int):
    R = values.shape[axis]
    a = np.take(values, np.arange(R - 1), axis=axis)
    b = np.take(values, np.arange(1, R), axis=axis)
    return a, b


def mc_gep_from_sdf(sdf: ScalarFieldGrid, grid: GridSpec | None = None) -> np.ndarray:
    """Linear zero crossing ``t = d0 / (d0 - d1)`` on every edge whose endpoint signs differ.

    A corner counts as inside when its value is negative.
    """
    if sdf.kind != "sdf":
        raise ValueError(f"expected an SDF grid, got {sdf.kind}")
    grid = grid or sdf.grid
    out = []
    for axis in range(3):
        d0, d1 = _pairs(sdf.values, axis)
        cross = (d0 < 0) != (d1 < 0)
        idx = np.nonzero(cross)
        a, b = d0[idx], d1[idx]
        out.append(_edge_points(grid, axis, idx, a / (a - b)))
    return np.concatenate(out)


def udf_gradient_sign_gep(udf: ScalarFieldGrid, grid: GridSpec | None = None) -> np.ndarray:
    """Simplified gradient-sign edge extraction on an unsigned grid.

    Central-difference gradients are projected on each edge; where the
    projections at the two endpoints have opposite signs the edge is taken to
    straddle the surface, and the crossing is interpolated on magnitudes,
    ``t = u0 / (u0 + u1)`` (0.5 when both vanish). This is a stand-in for
    vote-based sign propagation, not a faithful reimplementation of it.
    """
    if udf.kind != "udf":
        raise ValueError(f"expected a UDF grid, got {udf.kind}")
    grid = grid or udf.grid
    if grid.resolution < 3:
        raise ValueError("gradient-sign extraction needs at least 3 corners per axis")
    out = []
    for axis in range(3):
        g = np.gradient(udf.values, grid.spacing, axis=axis)
        g0, g1 = _pairs(g, axis)
        cross = (g0 * g1) < 0
        del g, g0, g1
        u0, u1 = _pairs(udf.values, axis)
        idx = np.nonzero(cross)
        a, b = u0[idx], u1[idx]
        s = a + b
        t = np.divide(a, s, out=np.full_like(a, 0.5), where=s > 0)
        out.append(_edge_points(grid, axis, idx, t))
    return np.concatenate(out)

"""Bounding volume hierarchy over a triangle mesh.

Line stabbing uses the watertight ray/triangle test of Woop, Benthin and Wald
(shear to the dominant axis, then 2D edge functions). Edge functions of a
shared edge are computed from the same two projected vertices, so neighbouring
triangles can never both miss a line that passes through their common edge.
Double reports on shared edges and vertices are collapsed afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .mesh import TriangleMesh

DEDUP_TOL = 1e-9
LEAF_SIZE = 4
_STACK = 128
_MAX_HITS = 512


@dataclass(frozen=True)
class Bvh:
    """Flattened BVH. Leaf ``n`` covers ``order[start[n]:start[n] + count[n]]``."""

    box_min: np.ndarray
    box_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray
    tri_verts: np.ndarray  # (m, 3, 3) corner positions in ``order``

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    @classmethod
    def build(cls, mesh: TriangleMesh, leaf_size: int = LEAF_SIZE) -> Bvh:
        ids = np.flatnonzero(~mesh.degenerate)
        tv = mesh.vertices[mesh.triangles[ids]]
        lo_t, hi_t = tv.min(axis=1), tv.max(axis=1)
        cen = 0.5 * (lo_t + hi_t)

        bmin, bmax, left, right, start, count = [], [], [], [], [], []
        order = np.empty(len(ids), dtype=np.int64)
        work = np.arange(len(ids))
        filled = 0
        # (node index, indices into ids)
        stack = [(0, work)]
        bmin.append(None), bmax.append(None), left.append(-1), right.append(-1), start.append(0), count.append(0)
        while stack:
            node, idx = stack.pop()
            bmin[node] = lo_t[idx].min(axis=0) if len(idx) else np.zeros(3)
            bmax[node] = hi_t[idx].max(axis=0) if len(idx) else np.zeros(3)
            if len(idx) <= leaf_size:
                start[node] = filled
                count[node] = len(idx)
                order[filled:filled + len(idx)] = ids[idx]
                filled += len(idx)
                continue
            c = cen[idx]
            axis = int(np.argmax(c.max(0) - c.min(0)))
            split = np.argsort(c[:, axis], kind="stable")
            half = len(idx) // 2
            children = []
            for part in (idx[split[:half]], idx[split[half:]]):
                bmin.append(None), bmax.append(None), left.append(-1), right.append(-1)
                start.append(0), count.append(0)
                children.append(len(left) - 1)
                stack.append((children[-1], part))
            left[node], right[node] = children
        order = order[:filled]
        return cls(
            box_min=np.asarray(bmin, dtype=np.float64),
            box_max=np.asarray(bmax, dtype=np.float64),
            left=np.asarray(left, dtype=np.int64),
            right=np.asarray(right, dtype=np.int64),
            start=np.asarray(start, dtype=np.int64),
            count=np.asarray(count, dtype=np.int64),
            order=order,
            tri_verts=np.ascontiguousarray(mesh.vertices[mesh.triangles[order]]),
        )

    def _arrays(self):
        return self.box_min, self.box_max, self.left, self.right, self.start, self.count, self.tri_verts


@dataclass(frozen=True)
class RayHitList:
    t: np.ndarray
    triangle: np.ndarray
    entering: np.ndarray

    def __len__(self) -> int:
        return len(self.t)


@nb.njit(cache=True, inline="always")
def _line_triangle(o, d, v0, v1, v2, kx, ky, kz, sx, sy, sz):
    """Signed parameter of the line/triangle intersection, or NaN."""
    ax = v0[kx] - o[kx]
    ay = v0[ky] - o[ky]
    az = v0[kz] - o[kz]
    bx = v1[kx] - o[kx]
    by = v1[ky] - o[ky]
    bz = v1[kz] - o[kz]
    cx = v2[kx] - o[kx]
    cy = v2[ky] - o[ky]
    cz = v2[kz] - o[kz]
    ax = ax - sx * az
    ay = ay - sy * az
    bx = bx - sx * bz
    by = by - sy * bz
    cx = cx - sx * cz
    cy = cy - sy * cz
    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    if (u < 0.0 or v < 0.0 or w < 0.0) and (u > 0.0 or v > 0.0 or w > 0.0):
        return np.nan
    det = u + v + w
    if det == 0.0:
        return np.nan
    t = (u * sz * az + v * sz * bz + w * sz * cz) / det
    return t


@nb.njit(cache=True)
def _shear(d):
    kz = 0
    if abs(d[1]) > abs(d[kz]):
        kz = 1
    if abs(d[2]) > abs(d[kz]):
        kz = 2
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    if d[kz] < 0.0:
        kx, ky = ky, kx
    return kx, ky, kz, d[kx] / d[kz], d[ky] / d[kz], 1.0 / d[kz]


@nb.njit(cache=True, inline="always")
def _line_box(o, d, lo, hi, pad):
    tmin = -np.inf
    tmax = np.inf
    for k in range(3):
        a = lo[k] - pad
        b = hi[k] + pad
        if d[k] == 0.0:
            if o[k] < a or o[k] > b:
                return False
        else:
            t0 = (a - o[k]) / d[k]
            t1 = (b - o[k]) / d[k]
            if t0 > t1:
                t0, t1 = t1, t0
            if t0 > tmin:
                tmin = t0
            if t1 < tmax:
                tmax = t1
            if tmin > tmax:
                return False
    return True


@nb.njit(cache=True)
def _dedup_sorted(ts, tris, n, tol):
    """Sort the first n hits by t and drop hits within ``tol`` of the previous kept hit."""
    perm = np.argsort(ts[:n], kind="mergesort")
    out_t = np.empty(n)
    out_i = np.empty(n, dtype=np.int64)
    m = 0
    for j in range(n):
        t = ts[perm[j]]
        if m > 0 and t - out_t[m - 1] < tol:
            continue
        out_t[m] = t
        out_i[m] = tris[perm[j]]
        m += 1
    return out_t[:m], out_i[:m]


@nb.njit(cache=True)
def _stab_one(o, d, bmin, bmax, left, right, start, count, tv, pad, buf_t, buf_i):
    kx, ky, kz, sx, sy, sz = _shear(d)
    stack = np.empty(_STACK, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    n = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not _line_box(o, d, bmin[node], bmax[node], pad):
            continue
        if left[node] < 0:
            for j in range(start[node], start[node] + count[node]):
                t = _line_triangle(o, d, tv[j, 0], tv[j, 1], tv[j, 2], kx, ky, kz, sx, sy, sz)
                if not np.isnan(t):
                    if n >= buf_t.shape[0]:
                        return -1
                    buf_t[n] = t
                    buf_i[n] = j
                    n += 1
        else:
            stack[sp] = left[node]
            stack[sp + 1] = right[node]
            sp += 2
    return n


@nb.njit(cache=True)
def _brute_one(o, d, tv, buf_t, buf_i):
    kx, ky, kz, sx, sy, sz = _shear(d)
    n = 0
    for j in range(tv.shape[0]):
        t = _line_triangle(o, d, tv[j, 0], tv[j, 1], tv[j, 2], kx, ky, kz, sx, sy, sz)
        if not np.isnan(t):
            if n >= buf_t.shape[0]:
                return -1
            buf_t[n] = t
            buf_i[n] = j
            n += 1
    return n


@nb.njit(cache=True, parallel=True)
def _stab_axis_batch(origins, axis, bmin, bmax, left, right, start, count, tv, pad, tol, cap):
    n_rays = origins.shape[0]
    out = np.full((n_rays, cap), np.nan)
    n_out = np.zeros(n_rays, dtype=np.int64)
    d = np.zeros(3)
    d[axis] = 1.0
    for r in nb.prange(n_rays):
        buf_t = np.empty(_MAX_HITS)
        buf_i = np.empty(_MAX_HITS, dtype=np.int64)
        n = _stab_one(origins[r], d, bmin, bmax, left, right, start, count, tv, pad, buf_t, buf_i)
        if n < 0:
            n_out[r] = -1
            continue
        ts, _ = _dedup_sorted(buf_t, buf_i, n, tol)
        m = min(ts.shape[0], cap)
        out[r, :m] = ts[:m]
        n_out[r] = ts.shape[0]
    return out, n_out


def _pad(bvh: Bvh) -> float:
    if bvh.n_nodes == 0:
        return 0.0
    ext = float(np.abs(np.concatenate([bvh.box_min[0], bvh.box_max[0]])).max())
    return 1e-12 * max(ext, 1.0)


def _finish(bvh: Bvh, d, ts, ids) -> RayHitList:
    tv = bvh.tri_verts[ids]
    normal = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
    return RayHitList(t=ts, triangle=bvh.order[ids], entering=(normal @ d) < 0.0)


def stab_ray(bvh: Bvh, mesh: TriangleMesh | None, origin, direction, tol: float = DEDUP_TOL) -> RayHitList:
    """All intersections of the full line ``origin + t * direction`` with the mesh, sorted by t.

    ``mesh`` is accepted for interface symmetry; the BVH carries its own copy
    of the triangle corners.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    buf_t = np.empty(_MAX_HITS)
    buf_i = np.empty(_MAX_HITS, dtype=np.int64)
    if bvh.n_nodes == 0:
        return RayHitList(np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool))
    bmin, bmax, left, right, start, count, tv = bvh._arrays()
    n = _stab_one(o, d, bmin, bmax, left, right, start, count, tv, _pad(bvh), buf_t, buf_i)
    if n < 0:
        raise RuntimeError(f"line crosses the mesh more than {_MAX_HITS} times")
    ts, ids = _dedup_sorted(buf_t, buf_i, n, tol)
    return _finish(bvh, d, ts, ids)


def stab_ray_brute(bvh: Bvh, origin, direction, tol: float = DEDUP_TOL) -> RayHitList:
    """Reference: test every triangle, no hierarchy."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    buf_t = np.empty(_MAX_HITS)
    buf_i = np.empty(_MAX_HITS, dtype=np.int64)
    n = _brute_one(o, d, bvh.tri_verts, buf_t, buf_i)
    if n < 0:
        raise RuntimeError(f"line crosses the mesh more than {_MAX_HITS} times")
    ts, ids = _dedup_sorted(buf_t, buf_i, n, tol)
    return _finish(bvh, d, ts, ids)


def stab_axis_lines(bvh: Bvh, axis: int, origins: np.ndarray, tol: float = DEDUP_TOL, chunk: int = 8192):
    """Stab many lines parallel to world ``axis``.

    ``origins`` is (n, 3) with the axis component ignored (set to zero).
    Returns hit coordinates along the axis in CSR form ``(values, offsets)``.
    """
    origins = np.array(origins, dtype=np.float64)
    origins[:, axis] = 0.0
    if bvh.n_nodes == 0 or len(origins) == 0:
        return np.zeros(0), np.zeros(len(origins) + 1, dtype=np.int64)
    bmin, bmax, left, right, start, count, tv = bvh._arrays()
    pad = _pad(bvh)
    cap = 16
    values, counts = [], []
    lo = 0
    while lo < len(origins):
        part = origins[lo:lo + chunk]
        out, n = _stab_axis_batch(part, axis, bmin, bmax, left, right, start, count, tv, pad, tol, cap)
        if (n < 0).any():
            raise RuntimeError(f"a line crosses the mesh more than {_MAX_HITS} times")
        if n.max(initial=0) > cap:
            cap = int(n.max())
            continue
        keep = np.arange(cap)[None, :] < n[:, None]
        values.append(out[keep])
        counts.append(n)
        lo += chunk
    counts = np.concatenate(counts)
    offsets = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return np.concatenate(values), offsets


@nb.njit(cache=True, inline="always")
def _dot(ax, ay, az, bx, by, bz):
    return ax * bx + ay * by + az * bz


@nb.njit(cache=True)
def _closest_on_triangle(p, a, b, c):
    """Squared distance from p to triangle abc (Ericson, Real-Time Collision Detection 5.1.5)."""
    abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    acx, acy, acz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    apx, apy, apz = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    d1 = _dot(abx, aby, abz, apx, apy, apz)
    d2 = _dot(acx, acy, acz, apx, apy, apz)
    if d1 <= 0.0 and d2 <= 0.0:
        return _dot(apx, apy, apz, apx, apy, apz)
    bpx, bpy, bpz = p[0] - b[0], p[1] - b[1], p[2] - b[2]
    d3 = _dot(abx, aby, abz, bpx, bpy, bpz)
    d4 = _dot(acx, acy, acz, bpx, bpy, bpz)
    if d3 >= 0.0 and d4 <= d3:
        return _dot(bpx, bpy, bpz, bpx, bpy, bpz)
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        s = d1 / (d1 - d3)
        rx, ry, rz = apx - s * abx, apy - s * aby, apz - s * abz
        return _dot(rx, ry, rz, rx, ry, rz)
    cpx, cpy, cpz = p[0] - c[0], p[1] - c[1], p[2] - c[2]
    d5 = _dot(abx, aby, abz, cpx, cpy, cpz)
    d6 = _dot(acx, acy, acz, cpx, cpy, cpz)
    if d6 >= 0.0 and d5 <= d6:
        return _dot(cpx, cpy, cpz, cpx, cpy, cpz)
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        s = d2 / (d2 - d6)
        rx, ry, rz = apx - s * acx, apy - s * acy, apz - s * acz
        return _dot(rx, ry, rz, rx, ry, rz)
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        s = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        rx = bpx - s * (c[0] - b[0])
        ry = bpy - s * (c[1] - b[1])
        rz = bpz - s * (c[2] - b[2])
        return _dot(rx, ry, rz, rx, ry, rz)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    rx = apx - abx * v - acx * w
    ry = apy - aby * v - acy * w
    rz = apz - abz * v - acz * w
    return _dot(rx, ry, rz, rx, ry, rz)


@nb.njit(cache=True, inline="always")
def _box_dist2(p, lo, hi):
    s = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            s += (lo[k] - p[k]) ** 2
        elif p[k] > hi[k]:
            s += (p[k] - hi[k]) ** 2
    return s


@nb.njit(cache=True, parallel=True)
def _closest_batch(points, bmin, bmax, left, right, start, count, tv):
    n = points.shape[0]
    out = np.empty(n)
    for i in nb.prange(n):
        p = points[i]
        best = np.inf
        stack = np.empty(_STACK, dtype=np.int64)
        sp = 1
        stack[0] = 0
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_dist2(p, bmin[node], bmax[node]) >= best:
                continue
            if left[node] < 0:
                for j in range(start[node], start[node] + count[node]):
                    d2 = _closest_on_triangle(p, tv[j, 0], tv[j, 1], tv[j, 2])
                    if d2 < best:
                        best = d2
            else:
                l, r = left[node], right[node]
                # visit the nearer child first
                if _box_dist2(p, bmin[l], bmax[l]) < _box_dist2(p, bmin[r], bmax[r]):
                    l, r = r, l
                stack[sp] = l
                stack[sp + 1] = r
                sp += 2
        out[i] = np.sqrt(best)
    return out


def closest_distance(bvh: Bvh, points: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point to the nearest non-degenerate triangle."""
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    bmin, bmax, left, right, start, count, tv = bvh._arrays()
    return _closest_batch(pts, bmin, bmax, left, right, start, count, tv)


@nb.njit(cache=True, parallel=True)
def _closest_brute(points, tv):
    out = np.empty(points.shape[0])
    for i in nb.prange(points.shape[0]):
        best = np.inf
        for j in range(tv.shape[0]):
            d2 = _closest_on_triangle(points[i], tv[j, 0], tv[j, 1], tv[j, 2])
            if d2 < best:
                best = d2
        out[i] = np.sqrt(best)
    return out


def closest_distance_brute(bvh: Bvh, points: np.ndarray) -> np.ndarray:
    return _closest_brute(np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3), bvh.tri_verts)

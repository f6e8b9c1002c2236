"""Grid-edge-point reconstruction from orthogonal distance samples.

Each sample on a line predicts its nearest surface point directly,
``c = s - sign * d`` with ``sign`` the derivative sign of the 1D distance.
Runs of samples sharing a sign, with no predicted crossing between
consecutive members, look at the same surface point and are averaged;
neighbouring run estimates closer than ``tau`` are merged. Points from the
three directions are then filtered by neighbourhood support.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np
from scipy.spatial import cKDTree

from .field import DirectionalField
from .grid import Direction, GridSpec

DEFAULT_TAU = 1.0 / 512.0
MIN_SUPPORT = 3


@dataclass
class RaySamples:
    positions: np.ndarray
    distances: np.ndarray
    deriv_sign: np.ndarray
    direction: Direction = Direction.LR
    line: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.distances = np.asarray(self.distances, dtype=np.float64)
        self.deriv_sign = np.asarray(self.deriv_sign, dtype=np.int8)
        if np.any(np.diff(self.positions) <= 0):
            raise ValueError("sample positions must be strictly increasing")


@nb.njit(cache=True)
def _estimate_line(pos, dist, sign, tau, out_c, out_n):
    """Segment-average then merge one line. Returns the number of points written."""
    n_out = 0
    have = False
    cur_sum = 0.0
    cur_n = 0
    seg_sum = 0.0
    seg_n = 0
    prev_sign = 0
    prev_zero = False
    prev_pos = 0.0
    prev_c = 0.0
    for k in range(pos.shape[0]):
        d = dist[k]
        if np.isnan(d):
            continue
        sg = sign[k]
        zero = d == 0.0
        c = pos[k] - sg * d
        # a surface point predicted strictly between two same-sign samples means
        # they look at different crossings
        passed = (sg < 0 and prev_c < pos[k]) or (sg > 0 and c > prev_pos)
        if seg_n > 0 and (sg != prev_sign or zero or prev_zero or passed):
            # close the running segment and try to merge it
            est = seg_sum / seg_n
            if have and abs(est - cur_sum / cur_n) < tau:
                cur_sum += seg_sum
                cur_n += seg_n
            else:
                if have:
                    out_c[n_out] = cur_sum / cur_n
                    out_n[n_out] = cur_n
                    n_out += 1
                cur_sum = seg_sum
                cur_n = seg_n
                have = True
            seg_sum = 0.0
            seg_n = 0
        seg_sum += c
        seg_n += 1
        prev_sign = sg
        prev_zero = zero
        prev_pos = pos[k]
        prev_c = c
    if seg_n > 0:
        est = seg_sum / seg_n
        if have and abs(est - cur_sum / cur_n) < tau:
            cur_sum += seg_sum
            cur_n += seg_n
        else:
            if have:
                out_c[n_out] = cur_sum / cur_n
                out_n[n_out] = cur_n
                n_out += 1
            cur_sum = seg_sum
            cur_n = seg_n
            have = True
    if have:
        out_c[n_out] = cur_sum / cur_n
        out_n[n_out] = cur_n
        n_out += 1
    return n_out


def estimate_ray_points(ray: RaySamples, tau: float = DEFAULT_TAU) -> list[tuple[float, int]]:
    """Surface points along one line as ``(axis coordinate, contributing samples)``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    n = len(ray.positions)
    out_c = np.empty(max(n, 1))
    out_n = np.empty(max(n, 1), dtype=np.int64)
    m = _estimate_line(ray.positions, ray.distances, ray.deriv_sign, float(tau), out_c, out_n)
    return [(float(out_c[i]), int(out_n[i])) for i in range(m)]


@nb.njit(cache=True, parallel=True)
def _estimate_lines(pos, dist, sign, lines, tau, out_c, out_n, counts):
    for i in nb.prange(lines.shape[0]):
        r = lines[i]
        counts[i] = _estimate_line(pos, dist[r], sign[r], tau, out_c[i], out_n[i])


@dataclass
class DirectionPoints:
    """Points estimated on the lines of one direction."""

    direction: Direction
    grid: GridSpec
    points: np.ndarray  # (n, 3)
    counts: np.ndarray  # contributing samples per point
    line: np.ndarray  # source line r = iv * R + iu
    order: np.ndarray  # rank of the point along its line

    def __len__(self) -> int:
        return len(self.points)

    @property
    def axis_coord(self) -> np.ndarray:
        return self.points[:, self.direction.axis]


def _empty_points(direction: Direction, grid: GridSpec) -> DirectionPoints:
    return DirectionPoints(direction, grid, np.zeros((0, 3)), np.zeros(0, dtype=np.int64),
                           np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))


def reconstruct_direction(fld: DirectionalField, tau: float = DEFAULT_TAU) -> DirectionPoints:
    if tau <= 0:
        raise ValueError("tau must be positive")
    grid, R = fld.grid, fld.resolution
    lines = np.flatnonzero(fld.mask.ravel())
    if len(lines) == 0:
        return _empty_points(fld.direction, grid)
    dist = fld.distances.reshape(R * R, R)
    sign = fld.deriv_sign.reshape(R * R, R)
    out_c = np.empty((len(lines), R))
    out_n = np.empty((len(lines), R), dtype=np.int64)
    counts = np.empty(len(lines), dtype=np.int64)
    _estimate_lines(grid.coords, dist, sign, lines, float(tau), out_c, out_n, counts)

    keep = np.arange(R)[None, :] < counts[:, None]
    s = out_c[keep]
    line = np.repeat(lines, counts)
    order = (np.cumsum(keep, axis=1) - 1)[keep]
    pts = np.empty((len(s), 3))
    ua, va = fld.direction.plane_axes
    pts[:, fld.direction.axis] = s
    pts[:, ua] = grid.coords[line % R]
    pts[:, va] = grid.coords[line // R]
    return DirectionPoints(fld.direction, grid, pts, out_n[keep], line, order)


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

def _neighbour_edges() -> dict[int, np.ndarray]:
    """For an edge along axis a starting at corner c: all edges of the (up to 4) cells sharing it.

    Rows are (axis b, dx, dy, dz) relative to c.
    """
    table = {}
    for a in range(3):
        others = [x for x in range(3) if x != a]
        found = set()
        for d0, d1 in itertools.product((-1, 0), repeat=2):
            cell = [0, 0, 0]
            cell[others[0]], cell[others[1]] = d0, d1
            for b in range(3):
                bo = [x for x in range(3) if x != b]
                for e0, e1 in itertools.product((0, 1), repeat=2):
                    off = list(cell)
                    off[bo[0]] += e0
                    off[bo[1]] += e1
                    found.add((b, *off))
        table[a] = np.array(sorted(found), dtype=np.int64)
    return table


_NEIGHBOURS = _neighbour_edges()


def edge_keys(points: np.ndarray, axis: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Lattice edge (axis, corner index triple) hosting each point."""
    R = grid.resolution
    idx = np.rint((points + 1.0) / grid.spacing).astype(np.int64)
    idx = np.clip(idx, 0, R - 1)
    rows = np.arange(len(points))
    idx[rows, axis] = grid.edge_index(points[rows, axis])
    return idx, _encode(axis, idx, R)


def _encode(axis, idx, R):
    return ((axis * R + idx[..., 0]) * R + idx[..., 1]) * R + idx[..., 2]


def support_counts(points: np.ndarray, axis: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Number of other points on edges of the cells adjacent to each point's edge."""
    R = grid.resolution
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    corner, key = edge_keys(points, axis, grid)
    uniq, cnt = np.unique(key, return_counts=True)
    support = np.zeros(len(points), dtype=np.int64)
    for a in range(3):
        sel = np.flatnonzero(axis == a)
        if len(sel) == 0:
            continue
        nb_tab = _NEIGHBOURS[a]
        nb_corner = corner[sel][:, None, :] + nb_tab[None, :, 1:]
        nb_axis = np.broadcast_to(nb_tab[None, :, 0], nb_corner.shape[:2])
        valid = ((nb_corner >= 0) & (nb_corner <= R - 1)).all(-1)
        along = np.take_along_axis(nb_corner, nb_axis[..., None], axis=-1)[..., 0]
        valid &= along <= R - 2
        k = _encode(nb_axis, nb_corner, R)
        pos = np.clip(np.searchsorted(uniq, k), 0, len(uniq) - 1)
        hit = valid & (uniq[pos] == k)
        support[sel] = np.where(hit, cnt[pos], 0).sum(axis=1) - 1
    return support


@dataclass
class GepSet:
    parts: dict[Direction, DirectionPoints]
    grid: GridSpec
    points: np.ndarray  # all per-direction points, concatenated LR, FB, UD
    axis: np.ndarray
    counts: np.ndarray
    order: np.ndarray
    support: np.ndarray
    keep: np.ndarray
    normals: np.ndarray | None = field(default=None, repr=False)

    @property
    def fused(self) -> np.ndarray:
        return self.points[self.keep]

    @property
    def n_pre(self) -> int:
        return len(self.points)

    @property
    def n_fused(self) -> int:
        return int(self.keep.sum())


def fuse_directions(lr: DirectionPoints, fb: DirectionPoints, ud: DirectionPoints,
                    grid: GridSpec | None = None, min_support: int = MIN_SUPPORT) -> GepSet:
    parts = {Direction.LR: lr, Direction.FB: fb, Direction.UD: ud}
    grid = grid or lr.grid
    for p in parts.values():
        if p.grid.resolution != grid.resolution:
            raise ValueError(
                f"direction {p.direction.name} is on a {p.grid.resolution}^3 grid, expected {grid.resolution}^3"
            )
    pts = np.concatenate([p.points for p in parts.values()])
    axis = np.concatenate([np.full(len(p), p.direction.axis, dtype=np.int64) for p in parts.values()])
    support = support_counts(pts, axis, grid)
    return GepSet(
        parts=parts, grid=grid, points=pts, axis=axis,
        counts=np.concatenate([p.counts for p in parts.values()]),
        order=np.concatenate([p.order for p in parts.values()]),
        support=support, keep=support >= min_support,
    )


def reconstruct(fields: dict[Direction, DirectionalField], tau: float = DEFAULT_TAU,
                min_support: int = MIN_SUPPORT) -> GepSet:
    grids = {f.grid.resolution for f in fields.values()}
    if len(grids) != 1:
        raise ValueError(f"direction fields disagree on grid resolution: {sorted(grids)}")
    parts = [reconstruct_direction(fields[d], tau) for d in Direction]
    return fuse_directions(*parts, min_support=min_support)


# ---------------------------------------------------------------------------
# normals and export
# ---------------------------------------------------------------------------

def estimate_normals(gep: GepSet, k: int = 10) -> np.ndarray:
    """PCA normals of the fused points, oriented by crossing-parity votes.

    The n-th crossing along a line (counting from the negative end) enters the
    shape when n is even, so its outward side faces the negative axis.
    """
    pts = gep.fused
    votes = np.zeros((len(pts), 3))
    sel_axis, sel_order = gep.axis[gep.keep], gep.order[gep.keep]
    votes[np.arange(len(pts)), sel_axis] = np.where(sel_order % 2 == 0, -1.0, 1.0)
    if len(pts) < 3:
        return votes
    kk = min(k, len(pts))
    _, nbr = cKDTree(pts).query(pts, k=kk)
    local = pts[nbr] - pts[nbr].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    vote = votes[nbr].sum(axis=1)
    flip = (normals * vote).sum(1) < 0
    normals[flip] *= -1
    return normals


def export_points(gep: GepSet | np.ndarray, path, format: str | None = None,
                  normals: np.ndarray | None = None) -> None:
    """Write fused points as binary PLY (x y z nx ny nz, f32) or text XYZ."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if isinstance(gep, GepSet):
        pts = gep.fused
        if normals is None and fmt == "ply":
            normals = gep.normals if gep.normals is not None else estimate_normals(gep)
    else:
        pts = np.asarray(gep, dtype=np.float64).reshape(-1, 3)
    if fmt == "xyz":
        with open(path, "w", encoding="ascii") as fh:
            for p in pts.astype(np.float32):
                fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        return
    if fmt != "ply":
        raise ValueError(f"unsupported point format {fmt!r} (expected ply or xyz)")
    if normals is None:
        normals = np.zeros_like(pts)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "end_header\n"
    )
    body = np.concatenate([pts, normals], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(body.tobytes())


def read_points(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverse of :func:`export_points`; returns ``(points, normals or None)``."""
    path = Path(path)
    if path.suffix.lower() == ".xyz":
        text = path.read_text(encoding="ascii").split()
        return np.array(text, dtype=np.float32).reshape(-1, 3), None
    data = path.read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    n = 0
    for line in data[:end].decode("ascii").splitlines():
        if line.startswith("element vertex"):
            n = int(line.split()[2])
    body = np.frombuffer(data, dtype="<f4", count=6 * n, offset=end).reshape(n, 6)
    return body[:, :3].copy(), body[:, 3:].copy()

"""Surfaces that can be stabbed along lattice lines.

Every shape answers three questions: where do axis-parallel lines cross it,
how far is a point from it, and how to draw area-uniform samples from it.
``MeshShape`` answers them with a BVH; the analytic shapes answer in closed
form so tests have an oracle that does not share code with the mesh path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bvh import Bvh, closest_distance, stab_axis_lines
from .mesh import TriangleMesh


def _csr(lists) -> tuple[np.ndarray, np.ndarray]:
    counts = np.array([len(x) for x in lists], dtype=np.int64)
    offsets = np.zeros(len(lists) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    values = np.concatenate([np.asarray(x, dtype=np.float64) for x in lists]) if len(lists) else np.zeros(0)
    return values, offsets


def _line_origins(axis: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    pa = [a for a in range(3) if a != axis]
    o = np.zeros((len(u), 3))
    o[:, pa[0]] = u
    o[:, pa[1]] = v
    return o


@dataclass
class MeshShape:
    mesh: TriangleMesh
    bvh: Bvh = field(default=None)  # type: ignore[assignment]
    name: str = "mesh"

    def __post_init__(self):
        if self.bvh is None:
            self.bvh = Bvh.build(self.mesh)

    def axis_hits(self, axis: int, u: np.ndarray, v: np.ndarray):
        """Hit coordinates along ``axis`` for lines through plane points (u, v), as CSR."""
        return stab_axis_lines(self.bvh, axis, _line_origins(axis, np.asarray(u), np.asarray(v)))

    def udf(self, points: np.ndarray) -> np.ndarray:
        return closest_distance(self.bvh, points)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return sample_mesh_surface(self.mesh, n, rng)


def sample_mesh_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform samples: triangles chosen proportional to area, then uniform barycentrics."""
    area = mesh.triangle_areas()
    area[mesh.degenerate] = 0.0
    tri = rng.choice(len(area), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    p = mesh.vertices[mesh.triangles[tri]]
    return (1 - r1)[:, None] * p[:, 0] + (r1 * (1 - r2))[:, None] * p[:, 1] + (r1 * r2)[:, None] * p[:, 2]


@dataclass(frozen=True)
class AnalyticSphere:
    radius: float = 0.9
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    name: str = "sphere"

    def axis_hits(self, axis: int, u: np.ndarray, v: np.ndarray):
        pa = [a for a in range(3) if a != axis]
        c = np.asarray(self.center)
        du = np.asarray(u, dtype=np.float64) - c[pa[0]]
        dv = np.asarray(v, dtype=np.float64) - c[pa[1]]
        h2 = self.radius**2 - du * du - dv * dv
        hit = h2 > 0.0
        half = np.sqrt(np.where(hit, h2, 0.0))
        counts = np.where(hit, 2, 0).astype(np.int64)
        offsets = np.zeros(len(counts) + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        values = np.stack([c[axis] - half[hit], c[axis] + half[hit]], axis=1).ravel()
        return values, offsets

    def udf(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64) - np.asarray(self.center)
        return np.abs(np.linalg.norm(p, axis=-1) - self.radius)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64) - np.asarray(self.center)
        return np.linalg.norm(p, axis=-1) - self.radius

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        return self.udf(points)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        g = rng.standard_normal((n, 3))
        return np.asarray(self.center) + self.radius * g / np.linalg.norm(g, axis=1, keepdims=True)


@dataclass(frozen=True)
class AnalyticBoxes:
    """Union of disjoint solid axis-aligned boxes, each given as (lo, hi) corners."""

    boxes: tuple[tuple[tuple[float, float, float], tuple[float, float, float]], ...]
    name: str = "boxes"

    def _arrays(self):
        lo = np.array([b[0] for b in self.boxes], dtype=np.float64)
        hi = np.array([b[1] for b in self.boxes], dtype=np.float64)
        return lo, hi

    def axis_hits(self, axis: int, u: np.ndarray, v: np.ndarray):
        pa = [a for a in range(3) if a != axis]
        lo, hi = self._arrays()
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        inside = (
            (u[:, None] > lo[None, :, pa[0]]) & (u[:, None] < hi[None, :, pa[0]])
            & (v[:, None] > lo[None, :, pa[1]]) & (v[:, None] < hi[None, :, pa[1]])
        )
        lists = []
        for row in inside:
            ts = []
            for b in np.flatnonzero(row):
                ts += [lo[b, axis], hi[b, axis]]
            lists.append(np.sort(ts))
        return _csr(lists)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        lo, hi = self._arrays()
        out = np.full(p.shape[:-1], np.inf)
        for b in range(len(lo)):
            c = 0.5 * (lo[b] + hi[b])
            e = 0.5 * (hi[b] - lo[b])
            q = np.abs(p - c) - e
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            out = np.minimum(out, outside + inside)
        return out

    def udf(self, points: np.ndarray) -> np.ndarray:
        return np.abs(self.sdf(points))

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        return self.udf(points)

    def to_mesh(self) -> TriangleMesh:
        return TriangleMesh.concatenate([box_mesh(lo, hi) for lo, hi in self.boxes])

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return sample_mesh_surface(self.to_mesh(), n, rng)


# ---------------------------------------------------------------------------
# mesh fixtures
# ---------------------------------------------------------------------------

def box_mesh(lo, hi) -> TriangleMesh:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    v = np.array([[(hi if (i >> k) & 1 else lo)[k] for k in range(3)] for i in range(8)])
    # outward-facing quads on the 8 corners indexed by bit pattern (x=1, y=2, z=4)
    quads = [(0, 4, 6, 2), (1, 3, 7, 5), (0, 1, 5, 4), (2, 6, 7, 3), (0, 2, 3, 1), (4, 5, 7, 6)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(v, np.array(tris))


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    t = (1.0 + 5**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = np.array(verts, dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(faces, dtype=np.int64)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = inv.reshape(3, -1) + len(v)
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = m[0], m[1], m[2]
        f = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
        ])
        v = np.concatenate([v, mid])
    return TriangleMesh(v * radius + np.asarray(center, dtype=np.float64), f)


def bumpy_sphere(subdivisions: int = 5, amplitude: float = 0.08, seed: int = 7) -> TriangleMesh:
    """Closed blob with scan-like surface detail: a sphere displaced by random low-order harmonics."""
    base = icosphere(subdivisions)
    rng = np.random.default_rng(seed)
    n = base.vertices
    r = np.ones(len(n))
    for _ in range(12):
        k = rng.standard_normal(3)
        k *= rng.uniform(2.0, 7.0) / np.linalg.norm(k)
        r += amplitude / 4.0 * np.sin(n @ k + rng.uniform(0, 2 * np.pi))
    return TriangleMesh(n * r[:, None], base.triangles)


def plate_mesh(z: float = 0.0, half: float = 0.6, n: int = 1) -> TriangleMesh:
    """Open square sheet in the plane ``z`` made of ``2 n^2`` triangles."""
    s = np.linspace(-half, half, n + 1)
    x, y = np.meshgrid(s, s, indexing="ij")
    v = np.stack([x.ravel(), y.ravel(), np.full(x.size, z)], axis=1)
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    return TriangleMesh(v, np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)]))


# Two slabs separated by a gap that sits strictly inside one lattice interval
# [0, 2/(R-1)] for every R in {33, 65, 129, 257}. Extents avoid lattice planes.
PLATES_GAP = (0.0015, 0.0065)
PLATES_HALF = 0.6037
PLATES_DEPTH = 0.3021


def close_plates() -> AnalyticBoxes:
    h, d = PLATES_HALF, PLATES_DEPTH
    lo_gap, hi_gap = PLATES_GAP
    return AnalyticBoxes(
        boxes=(((-h, -h, -d), (h, h, lo_gap)), ((-h, -h, hi_gap), (h, h, d))),
        name="plates",
    )


def nested_shells() -> tuple[TriangleMesh, TriangleMesh]:
    return icosphere(3, 0.9), icosphere(2, 0.45, center=(0.05, -0.03, 0.02))

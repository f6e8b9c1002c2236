"""Triangle meshes: OBJ/PLY loading, validation and normalization."""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NORMALIZED_RADIUS = 0.9


class MeshError(Exception):
    """Base class for mesh loading and validation failures."""


class MeshParseError(MeshError):
    pass


class EmptyMeshError(MeshError):
    pass


class UnsupportedFormatError(MeshError):
    pass


class FaceIndexError(MeshError):
    pass


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    degenerate: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (n, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles must have shape (m, 3), got {t.shape}")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            bad = int(np.flatnonzero((t < 0).any(1) | (t >= len(v)).any(1))[0])
            raise FaceIndexError(
                f"triangle {bad} references vertex {t[bad].tolist()} but the mesh has {len(v)} vertices"
            )
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.degenerate is None:
            object.__setattr__(self, "degenerate", _degenerate_mask(v, t))

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def n_valid(self) -> int:
        return int((~self.degenerate).sum())

    def valid_triangles(self) -> np.ndarray:
        return self.triangles[~self.degenerate]

    def triangle_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    @staticmethod
    def concatenate(meshes) -> TriangleMesh:
        verts, tris, off = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + off)
            off += len(m.vertices)
        return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


def _degenerate_mask(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    if len(t) == 0:
        return np.zeros(0, dtype=bool)
    p = v[t]
    cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    lo, hi = v.min(0), v.max(0)
    scale = max(float(np.linalg.norm(hi - lo)), 1e-300)
    return np.linalg.norm(cross, axis=1) <= 1e-14 * scale * scale


def load_mesh(path, format: str | None = None) -> TriangleMesh:
    """Read an OBJ or PLY file.

    Polygons are fan-triangulated. Raises a :class:`MeshError` subclass naming
    the offending line, face or header entry on failure.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt not in ("obj", "ply"):
        raise UnsupportedFormatError(f"{path.name}: unsupported mesh format {fmt!r} (expected obj or ply)")
    if not path.exists():
        raise FileNotFoundError(path)
    if fmt == "obj":
        verts, faces = _read_obj(path)
    else:
        verts, faces = _read_ply(path)
    if len(verts) == 0 or len(faces) == 0:
        raise EmptyMeshError(f"{path.name}: mesh has {len(verts)} vertices and {len(faces)} faces")
    mesh = TriangleMesh(verts, faces)
    if mesh.n_valid == 0:
        raise EmptyMeshError(f"{path.name}: all {len(faces)} triangles are degenerate")
    return mesh


def _fan(poly: list[int]) -> list[tuple[int, int, int]]:
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _read_obj(path: Path):
    verts: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                try:
                    verts.append((float(parts[1]), float(parts[2]), float(parts[3])))
                except (IndexError, ValueError):
                    raise MeshParseError(f"{path.name}:{lineno}: malformed vertex {line.strip()!r}") from None
            elif tag == "f":
                poly = []
                for tok in parts[1:]:
                    try:
                        idx = int(tok.split("/")[0])
                    except ValueError:
                        raise MeshParseError(f"{path.name}:{lineno}: malformed face index {tok!r}") from None
                    if idx == 0:
                        raise MeshParseError(f"{path.name}:{lineno}: face index 0 is invalid in OBJ")
                    poly.append(idx - 1 if idx > 0 else len(verts) + idx)
                if len(poly) < 3:
                    raise MeshParseError(f"{path.name}:{lineno}: face with {len(poly)} vertices")
                for tri in _fan(poly):
                    if max(tri) >= len(verts) or min(tri) < 0:
                        bad = max(tri) if max(tri) >= len(verts) else min(tri)
                        raise FaceIndexError(
                            f"{path.name}:{lineno}: face references vertex {bad + 1} "
                            f"but only {len(verts)} vertices are defined"
                        )
                    faces.append(tri)
    return np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply(path: Path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MeshParseError(f"{path.name}: missing 'ply' magic")
        fmt = None
        elements: list[list] = []  # [name, count, [(prop, dtype, list_count_dtype|None)]]
        while True:
            raw = fh.readline()
            if not raw:
                raise MeshParseError(f"{path.name}: header not terminated by end_header")
            line = raw.decode("ascii", errors="replace").strip()
            if line == "end_header":
                break
            parts = line.split()
            if not parts or parts[0] in ("comment", "obj_info"):
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                elements.append([parts[1], int(parts[2]), []])
            elif parts[0] == "property":
                if not elements:
                    raise MeshParseError(f"{path.name}: property before any element: {line!r}")
                try:
                    if parts[1] == "list":
                        elements[-1][2].append((parts[4], _PLY_TYPES[parts[3]], _PLY_TYPES[parts[2]]))
                    else:
                        elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]], None))
                except (KeyError, IndexError):
                    raise MeshParseError(f"{path.name}: unsupported property declaration {line!r}") from None
        if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
            raise MeshParseError(f"{path.name}: unsupported PLY format {fmt!r}")
        body = fh.read()

    verts = np.zeros((0, 3))
    faces: list = []
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for pname, dt, cdt in props:
                    if pos >= len(tokens):
                        raise MeshParseError(f"{path.name}: truncated data in element {name!r}")
                    if cdt is None:
                        row[pname] = float(tokens[pos])
                        pos += 1
                    else:
                        n = int(tokens[pos])
                        row[pname] = [int(x) for x in tokens[pos + 1:pos + 1 + n]]
                        pos += 1 + n
                rows.append(row)
            if name == "vertex":
                verts = np.array([[r["x"], r["y"], r["z"]] for r in rows], dtype=np.float64).reshape(-1, 3)
            elif name == "face":
                key = _face_key(props, path)
                faces = [r[key] for r in rows]
    else:
        end = "<" if fmt == "binary_little_endian" else ">"
        pos = 0
        for name, count, props in elements:
            if all(cdt is None for _, _, cdt in props):
                dt = np.dtype([(p, end + d) for p, d, _ in props])
                nbytes = dt.itemsize * count
                if pos + nbytes > len(body):
                    raise MeshParseError(f"{path.name}: truncated data in element {name!r}")
                arr = np.frombuffer(body, dtype=dt, count=count, offset=pos)
                pos += nbytes
                if name == "vertex":
                    verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
                continue
            key = _face_key(props, path) if name == "face" else None
            rows = []
            for _ in range(count):
                row = {}
                for pname, dt, cdt in props:
                    if cdt is None:
                        size = np.dtype(dt).itemsize
                        row[pname] = struct.unpack_from(end + np.dtype(dt).char, body, pos)[0]
                        pos += size
                    else:
                        csize = np.dtype(cdt).itemsize
                        n = struct.unpack_from(end + np.dtype(cdt).char, body, pos)[0]
                        pos += csize
                        size = np.dtype(dt).itemsize
                        row[pname] = list(struct.unpack_from(end + np.dtype(dt).char * n, body, pos))
                        pos += size * n
                rows.append(row)
            if name == "face":
                faces = [r[key] for r in rows]

    tris = []
    for fi, poly in enumerate(faces):
        if len(poly) < 3:
            raise MeshParseError(f"{path.name}: face {fi} has {len(poly)} vertices")
        for tri in _fan([int(i) for i in poly]):
            if max(tri) >= len(verts) or min(tri) < 0:
                bad = max(tri) if max(tri) >= len(verts) else min(tri)
                raise FaceIndexError(
                    f"{path.name}: face {fi} references vertex {bad} but the mesh has {len(verts)} vertices"
                )
            tris.append(tri)
    return verts, np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def _face_key(props, path) -> str:
    for pname, _, cdt in props:
        if cdt is not None and pname in ("vertex_indices", "vertex_index"):
            return pname
    raise MeshParseError(f"{path.name}: face element has no vertex_indices list")


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def save_ply(mesh: TriangleMesh, path, binary: bool = True) -> None:
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(mesh.vertices.astype("<f8").tobytes())
            rec = np.zeros(len(mesh.triangles), dtype=[("n", "u1"), ("i", "<i4", (3,))])
            rec["n"] = 3
            rec["i"] = mesh.triangles
            fh.write(rec.tobytes())
        else:
            for v in mesh.vertices:
                fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n".encode())
            for t in mesh.triangles:
                fh.write(f"3 {t[0]} {t[1]} {t[2]}\n".encode())


def normalize_mesh(mesh: TriangleMesh, radius: float = NORMALIZED_RADIUS) -> TriangleMesh:
    """Center on the bounding-box center and scale so the farthest vertex sits at ``radius``."""
    if mesh.n_valid == 0:
        raise EmptyMeshError("cannot normalize a mesh whose triangles are all degenerate")
    used = np.unique(mesh.triangles)
    lo, hi = mesh.vertices[used].min(0), mesh.vertices[used].max(0)
    center = 0.5 * (lo + hi)
    shifted = mesh.vertices - center
    rmax = float(np.sqrt((shifted[used] ** 2).sum(1)).max())
    if rmax == 0.0:
        raise EmptyMeshError("mesh collapses to a single point")
    return TriangleMesh(shifted * (radius / rmax), mesh.triangles, mesh.degenerate)


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

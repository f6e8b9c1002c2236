"""Ground-truth orthogonal distance fields and SDF/UDF corner grids.

A directional field stores, for every lattice line parallel to one axis, the
sorted coordinates where the line crosses the surface, and from those the
1D unsigned distance and derivative sign at each of the R samples on the
line. Lines that miss the surface are masked out and carry NaN.

In-memory layout of the R x R x R arrays is ``[iv, iu, k]``: plane indices of
the line (``u``/``v`` are the two remaining world axes, ascending) followed by
the sample index along the line, so each line is contiguous.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np

from .grid import Direction, GridSpec

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
PARITY_WARN_RATE = 1e-3


class FieldFormatError(Exception):
    pass


@dataclass
class DirectionalField:
    direction: Direction
    grid: GridSpec
    mask: np.ndarray  # (R, R) bool, [iv, iu]
    distances: np.ndarray  # (R, R, R) float64, NaN on masked-out lines
    deriv_sign: np.ndarray  # (R, R, R) int8 in {-1, 0, +1}; 0 means undefined
    hit_values: np.ndarray  # CSR hit coordinates along the axis, line r = iv * R + iu
    hit_offsets: np.ndarray

    @property
    def resolution(self) -> int:
        return self.grid.resolution

    def hits(self, iv: int, iu: int) -> np.ndarray:
        r = iv * self.resolution + iu
        return self.hit_values[self.hit_offsets[r]:self.hit_offsets[r + 1]]

    def line_origin(self, iv: int, iu: int) -> np.ndarray:
        o = np.zeros(3)
        ua, va = self.direction.plane_axes
        o[ua] = self.grid.coords[iu]
        o[va] = self.grid.coords[iv]
        return o

    def world_order(self, a: np.ndarray) -> np.ndarray:
        """View of an ``[iv, iu, k]`` array as ``[iz, iy, ix]`` (x fastest in C order)."""
        return a.transpose(_to_world_perm(self.direction))


def _labels(direction: Direction) -> tuple[int, int, int]:
    ua, va = direction.plane_axes
    return (va, ua, direction.axis)


def _to_world_perm(direction: Direction) -> list[int]:
    lab = _labels(direction)
    return [lab.index(a) for a in (2, 1, 0)]


def _from_world_perm(direction: Direction) -> list[int]:
    return [(2, 1, 0).index(a) for a in _labels(direction)]


@dataclass
class ScalarFieldGrid:
    values: np.ndarray  # (R, R, R) indexed [ix, iy, iz]
    kind: str  # "sdf" or "udf"
    grid: GridSpec
    diagnostics: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@nb.njit(cache=True, parallel=True)
def _fill_lines(coords, hv, ho, dist, sign):
    n_lines = ho.shape[0] - 1
    n_s = coords.shape[0]
    for r in nb.prange(n_lines):
        a = ho[r]
        b = ho[r + 1]
        if a == b:
            for k in range(n_s):
                dist[r, k] = np.nan
                sign[r, k] = 0
            continue
        j = a
        for k in range(n_s):
            s = coords[k]
            while j < b and hv[j] < s:
                j += 1
            dr = hv[j] - s if j < b else np.inf
            dl = s - hv[j - 1] if j > a else np.inf
            if dr == 0.0:
                dist[r, k] = 0.0
                sign[r, k] = 1
            elif dr <= dl:
                # nearest hit ahead: distance falls as s grows; ties go to +axis
                dist[r, k] = dr
                sign[r, k] = -1
            else:
                dist[r, k] = dl
                sign[r, k] = 1


@nb.njit(cache=True, parallel=True)
def _query_lines(hv, ho, ray, s, dist, sign):
    for q in nb.prange(s.shape[0]):
        a = ho[ray[q]]
        b = ho[ray[q] + 1]
        if a == b:
            dist[q] = np.nan
            sign[q] = 0
            continue
        # first hit >= s
        lo = a
        hi = b
        while lo < hi:
            mid = (lo + hi) // 2
            if hv[mid] < s[q]:
                lo = mid + 1
            else:
                hi = mid
        dr = hv[lo] - s[q] if lo < b else np.inf
        dl = s[q] - hv[lo - 1] if lo > a else np.inf
        if dr == 0.0:
            dist[q] = 0.0
            sign[q] = 1
        elif dr <= dl:
            dist[q] = dr
            sign[q] = -1
        else:
            dist[q] = dl
            sign[q] = 1


@nb.njit(cache=True, parallel=True)
def _count_ahead(coords, hv, ho, ahead, behind):
    n_lines = ho.shape[0] - 1
    n_s = coords.shape[0]
    for r in nb.prange(n_lines):
        a = ho[r]
        b = ho[r + 1]
        j = a
        for k in range(n_s):
            s = coords[k]
            while j < b and hv[j] < s:
                j += 1
            behind[r, k] = j - a
            jj = j
            while jj < b and hv[jj] == s:
                jj += 1
            ahead[r, k] = b - jj


def query_hits(hit_values: np.ndarray, hit_offsets: np.ndarray, ray: np.ndarray, s: np.ndarray):
    """Exact 1D distance and derivative sign at arbitrary positions ``s`` on lines ``ray``."""
    ray = np.ascontiguousarray(ray, dtype=np.int64)
    s = np.ascontiguousarray(s, dtype=np.float64)
    dist = np.empty(len(s))
    sign = np.empty(len(s), dtype=np.int8)
    _query_lines(hit_values, hit_offsets, ray, s, dist, sign)
    return dist, sign


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def line_hits(shape, grid: GridSpec, direction: Direction):
    """Stab all R^2 lattice lines of ``direction``; CSR hits with line r = iv * R + iu."""
    u, v = grid.plane_lattice()
    return shape.axis_hits(direction.axis, u, v)


def field_from_hits(grid: GridSpec, direction: Direction, hit_values, hit_offsets) -> DirectionalField:
    R = grid.resolution
    hv = np.ascontiguousarray(hit_values, dtype=np.float64)
    ho = np.ascontiguousarray(hit_offsets, dtype=np.int64)
    if len(ho) != R * R + 1:
        raise ValueError(f"expected {R * R} lines of hits, got {len(ho) - 1}")
    dist = np.empty((R * R, R))
    sign = np.empty((R * R, R), dtype=np.int8)
    _fill_lines(grid.coords, hv, ho, dist, sign)
    mask = (np.diff(ho) > 0).reshape(R, R)
    return DirectionalField(
        direction=direction, grid=grid, mask=mask,
        distances=dist.reshape(R, R, R), deriv_sign=sign.reshape(R, R, R),
        hit_values=hv, hit_offsets=ho,
    )


def compute_uodf_gt(shape, grid: GridSpec, direction) -> DirectionalField:
    """Exact orthogonal distance field of ``shape`` along ``direction`` at all lattice corners."""
    direction = Direction.parse(direction)
    hv, ho = line_hits(shape, grid, direction)
    return field_from_hits(grid, direction, hv, ho)


def compute_uodf_all(shape, grid: GridSpec) -> dict[Direction, DirectionalField]:
    return {d: compute_uodf_gt(shape, grid, d) for d in Direction}


def corner_points(grid: GridSpec, ix=slice(None)) -> np.ndarray:
    c = grid.coords
    x, y, z = np.meshgrid(c[ix], c, c, indexing="ij")
    return np.stack([x, y, z], axis=-1)


def compute_udf_gt(shape, grid: GridSpec, slab: int = 16) -> ScalarFieldGrid:
    """Euclidean distance from every corner to the surface."""
    R = grid.resolution
    out = np.empty((R, R, R))
    for i in range(0, R, slab):
        pts = corner_points(grid, slice(i, i + slab))
        out[i:i + slab] = shape.udf(pts.reshape(-1, 3)).reshape(pts.shape[:-1])
    return ScalarFieldGrid(out, "udf", grid)


def compute_sdf_gt(shape, grid: GridSpec, udf: ScalarFieldGrid | None = None,
                   lr_field: DirectionalField | None = None) -> ScalarFieldGrid:
    """Sign from +X ray parity (odd crossings ahead means inside), magnitude from the UDF.

    Lines whose +X and -X parities disagree are counted; above 0.1% of
    corners a diagnostic is attached (typical for open surfaces).
    """
    R = grid.resolution
    if udf is None:
        udf = compute_udf_gt(shape, grid)
    if lr_field is None:
        hv, ho = line_hits(shape, grid, Direction.LR)
    else:
        hv, ho = lr_field.hit_values, lr_field.hit_offsets
    ahead = np.empty((R * R, R), dtype=np.int64)
    behind = np.empty((R * R, R), dtype=np.int64)
    _count_ahead(grid.coords, hv, ho, ahead, behind)
    # [iz, iy, ix] -> [ix, iy, iz]
    ahead = ahead.reshape(R, R, R).transpose(2, 1, 0)
    behind = behind.reshape(R, R, R).transpose(2, 1, 0)
    inside = (ahead % 2) == 1
    on_surface = udf.values == 0.0
    inconsistent = ((ahead % 2) != (behind % 2)) & ~on_surface
    values = np.where(inside, -udf.values, udf.values)
    values[on_surface] = 0.0
    result = ScalarFieldGrid(values, "sdf", grid)
    rate = float(inconsistent.mean())
    if rate > PARITY_WARN_RATE:
        msg = (f"ray parity disagrees between +X and -X at {rate:.2%} of corners; "
               "surface is probably not watertight, signs are unreliable")
        result.diagnostics.append(msg)
        log.warning(msg)
    return result


# ---------------------------------------------------------------------------
# binary format
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIB")
_KIND_CODES = {"sdf": 0, "udf": 1}
_SIGN_TAG = b"SIGN"


def export_field(fld: DirectionalField | ScalarFieldGrid, path) -> None:
    """Write a field in the little-endian grid format described in docs/FORMATS.md."""
    path = Path(path)
    R = fld.grid.resolution
    with open(path, "wb") as fh:
        if isinstance(fld, DirectionalField):
            fh.write(_HEADER.pack(b"UODF", FORMAT_VERSION, R, fld.direction.axis))
            fh.write(np.ascontiguousarray(fld.world_order(fld.distances)).astype("<f4").tobytes())
            fh.write(fld.mask.astype(np.uint8).tobytes())
            counts = np.diff(fld.hit_offsets)
            hv = fld.hit_values.astype("<f4")
            for r in range(R * R):
                fh.write(struct.pack("<I", counts[r]))
                fh.write(hv[fld.hit_offsets[r]:fld.hit_offsets[r + 1]].tobytes())
            if (fld.mask.ravel() & (counts == 0)).any():
                # predicted fields have no hit lists to rebuild signs from
                fh.write(_SIGN_TAG)
                fh.write(np.ascontiguousarray(fld.world_order(fld.deriv_sign)).astype(np.int8).tobytes())
        else:
            fh.write(_HEADER.pack(b"SCLR", FORMAT_VERSION, R, _KIND_CODES[fld.kind]))
            fh.write(np.ascontiguousarray(fld.values.transpose(2, 1, 0)).astype("<f4").tobytes())


def read_field(path) -> DirectionalField | ScalarFieldGrid:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FieldFormatError(f"{path}: file too short for a header")
    magic, version, R, code = _HEADER.unpack_from(data, 0)
    if magic not in (b"UODF", b"SCLR"):
        raise FieldFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FieldFormatError(f"{path}: unsupported version {version}")
    grid = GridSpec(R)
    pos = _HEADER.size
    n = R ** 3
    if len(data) < pos + 4 * n:
        raise FieldFormatError(f"{path}: truncated value block")
    vals = np.frombuffer(data, dtype="<f4", count=n, offset=pos).astype(np.float64).reshape(R, R, R)
    pos += 4 * n
    if magic == b"SCLR":
        kinds = {v: k for k, v in _KIND_CODES.items()}
        if code not in kinds:
            raise FieldFormatError(f"{path}: unknown scalar kind code {code}")
        return ScalarFieldGrid(np.ascontiguousarray(vals.transpose(2, 1, 0)), kinds[code], grid)
    if code > 2:
        raise FieldFormatError(f"{path}: unknown direction code {code}")
    direction = Direction(code)
    if len(data) < pos + R * R:
        raise FieldFormatError(f"{path}: truncated mask block")
    mask = np.frombuffer(data, dtype=np.uint8, count=R * R, offset=pos).astype(bool).reshape(R, R)
    pos += R * R
    counts = np.empty(R * R, dtype=np.int64)
    chunks = []
    for r in range(R * R):
        if len(data) < pos + 4:
            raise FieldFormatError(f"{path}: truncated hit list at line {r}")
        (c,) = struct.unpack_from("<I", data, pos)
        pos += 4
        chunks.append(np.frombuffer(data, dtype="<f4", count=c, offset=pos))
        pos += 4 * c
        counts[r] = c
    offsets = np.zeros(R * R + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    hv = np.concatenate(chunks).astype(np.float64) if chunks else np.zeros(0)
    distances = np.ascontiguousarray(vals.transpose(_from_world_perm(direction)))
    if data[pos:pos + 4] == _SIGN_TAG:
        pos += 4
        if len(data) < pos + n:
            raise FieldFormatError(f"{path}: truncated sign block")
        raw = np.frombuffer(data, dtype=np.int8, count=n, offset=pos).reshape(R, R, R)
        sign = np.ascontiguousarray(raw.transpose(_from_world_perm(direction)))
    else:
        sign = np.empty((R * R, R), dtype=np.int8)
        scratch = np.empty((R * R, R))
        _fill_lines(grid.coords, hv, offsets, scratch, sign)
        sign = sign.reshape(R, R, R)
    return DirectionalField(direction, grid, mask, distances, sign, hv, offsets)

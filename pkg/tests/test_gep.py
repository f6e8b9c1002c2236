import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from uodf.field import compute_uodf_all, compute_uodf_gt, field_from_hits, query_hits
from uodf.gep import (DEFAULT_TAU, DirectionPoints, RaySamples, estimate_normals, estimate_ray_points, export_points,
                      fuse_directions, read_points, reconstruct, reconstruct_direction, support_counts)
from uodf.grid import Direction, GridSpec
from uodf.shapes import MeshShape, plate_mesh

NINE = np.linspace(0.0, 1.0, 9)


def exact_ray(hits, pos=NINE):
    hits = np.sort(np.asarray(hits, dtype=np.float64))
    d, s = query_hits(hits, np.array([0, len(hits)]), np.zeros(len(pos), dtype=np.int64), pos)
    return RaySamples(pos, d, s)


def test_single_hit_on_sample_merges_to_nine():
    assert estimate_ray_points(exact_ray([0.5])) == [(0.5, 9)]


def test_single_hit_between_samples():
    [(c, n)] = estimate_ray_points(exact_ray([0.53]))
    assert c == pytest.approx(0.53, abs=1e-15) and n == 9


def test_three_hits_two_in_one_interval():
    # A alone; B and C inside [0.75, 0.875] and farther apart than tau
    out = estimate_ray_points(exact_ray([0.3, 0.76, 0.79]))
    pts = [c for c, _ in out]
    assert np.allclose(pts, [0.3, 0.76, 0.79], atol=1e-15)
    assert sum(n for _, n in out) == 9
    assert 0.75 < pts[1] < pts[2] < 0.875


def test_close_pair_within_tau_merges():
    out = estimate_ray_points(exact_ray([0.76, 0.7605]))
    assert len(out) == 1 and out[0][0] == pytest.approx(0.76025, abs=1e-3)


def test_single_sample_segments_are_valid():
    out = estimate_ray_points(RaySamples([0.0], [0.25], [-1]))
    assert out == [(0.25, 1)]


def test_nan_samples_skipped():
    r = exact_ray([0.53])
    r.distances[4] = np.nan
    [(c, n)] = estimate_ray_points(r)
    assert c == pytest.approx(0.53) and n == 8


def test_validation():
    with pytest.raises(ValueError):
        RaySamples([0.0, 0.0], [0.1, 0.1], [1, 1])
    with pytest.raises(ValueError):
        estimate_ray_points(exact_ray([0.5]), tau=0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-0.2, 1.2, allow_nan=False), min_size=1, max_size=6))
def test_exact_inputs_only_emit_true_crossings(hits):
    hits = np.unique(np.round(hits, 6))
    assume(len(hits) == 1 or np.diff(hits).min() > 1e-5)
    pos = np.linspace(0, 1, 17)
    out = estimate_ray_points(exact_ray(hits, pos), tau=1e-9)
    for c, _ in out:
        assert np.abs(hits - c).min() < 1e-12
    assert sum(n for _, n in out) == len(pos)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=1, max_size=3))
def test_well_separated_hits_all_recovered(hits):
    hits = np.unique(np.round(hits, 6))
    assume(len(hits) == 1 or np.diff(hits).min() > 0.3)
    out = estimate_ray_points(exact_ray(hits))
    assert np.allclose([c for c, _ in out], hits, atol=1e-14)


def test_sphere_direction_points_on_surface(sphere):
    g = GridSpec(65)
    p = reconstruct_direction(compute_uodf_gt(sphere, g, "LR"))
    assert len(p) > 0
    assert (p.points[:, 1] ** 2 + p.points[:, 2] ** 2 <= 0.81).all()
    assert np.abs(np.linalg.norm(p.points, axis=1) - 0.9).max() < 1e-7
    # every point lies on its source line
    R = g.resolution
    assert np.array_equal(p.points[:, 1], g.coords[p.line % R])
    assert np.array_equal(p.points[:, 2], g.coords[p.line // R])


def test_empty_mask_empty_result():
    g = GridSpec(9)
    f = field_from_hits(g, Direction.UD, np.zeros(0), np.zeros(82, dtype=np.int64))
    assert len(reconstruct_direction(f)) == 0


def test_thin_plate_one_point_per_line():
    g = GridSpec(17)
    f = compute_uodf_gt(MeshShape(plate_mesh(0.0, 0.6, 2)), g, "UD")
    p = reconstruct_direction(f)
    assert len(p) == f.mask.sum()
    assert (p.points[:, 2] == 0.0).all()


def test_sphere_fusion_keeps_almost_everything(sphere):
    g = GridSpec(65)
    gep = reconstruct(compute_uodf_all(sphere, g))
    assert gep.n_fused >= 0.99 * gep.n_pre
    assert len(gep.fused) <= gep.n_pre


def _parts_from(points, axis, g):
    parts = []
    for d in Direction:
        sel = axis == d.axis
        n = int(sel.sum())
        parts.append(DirectionPoints(d, g, points[sel], np.ones(n, dtype=np.int64),
                                     np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64)))
    return parts


def test_isolated_points_removed(sphere):
    g = GridSpec(33)
    fields = compute_uodf_all(sphere, g)
    parts = [reconstruct_direction(fields[d]) for d in Direction]
    base = fuse_directions(*parts)
    iso = np.array([[0.01, 0.0, 0.0], [0.0, 0.3125, 0.01], [0.0, 0.01, -0.3125]])
    iso_axis = np.array([0, 2, 1])
    pts = np.concatenate([base.points, iso])
    ax = np.concatenate([base.axis, iso_axis])
    fused = fuse_directions(*_parts_from(pts, ax, g))
    fused_set = {tuple(p) for p in fused.fused}
    for p in iso:
        assert tuple(p) not in fused_set
    assert fused.n_fused == base.n_fused


def test_planar_patch_interior_kept():
    g = GridSpec(17)
    gep = reconstruct(compute_uodf_all(MeshShape(plate_mesh(0.01, 0.55, 4)), g))
    interior = np.abs(gep.points[:, :2]).max(1) < 0.4
    assert gep.keep[interior].all()


def test_support_count_excludes_self():
    g = GridSpec(9)
    p = np.array([[0.1, 0.0, 0.0]])
    assert support_counts(p, np.array([0]), g).tolist() == [0]


def test_resolution_mismatch_rejected(sphere):
    a = compute_uodf_all(sphere, GridSpec(9))
    a[Direction.UD] = compute_uodf_gt(sphere, GridSpec(17), "UD")
    with pytest.raises(ValueError, match="resolution"):
        reconstruct(a)


def test_normals_point_outward(sphere):
    gep = reconstruct(compute_uodf_all(sphere, GridSpec(33)))
    n = estimate_normals(gep)
    p = gep.fused
    cos = (n * p).sum(1) / np.linalg.norm(p, axis=1)
    assert (cos > 0.9).mean() > 0.99


def test_export_round_trip(tmp_path, sphere):
    gep = reconstruct(compute_uodf_all(sphere, GridSpec(17)))
    export_points(gep, tmp_path / "p.ply")
    pts, nrm = read_points(tmp_path / "p.ply")
    assert np.array_equal(pts, gep.fused.astype(np.float32))
    assert np.allclose(np.linalg.norm(nrm, axis=1), 1, atol=1e-6)
    export_points(gep.fused, tmp_path / "p.xyz")
    lines = (tmp_path / "p.xyz").read_text().splitlines()
    assert len(lines) == gep.n_fused and len(lines[0].split()) == 3
    xyz, _ = read_points(tmp_path / "p.xyz")
    assert np.array_equal(xyz, gep.fused.astype(np.float32))


def test_export_empty(tmp_path):
    export_points(np.zeros((0, 3)), tmp_path / "e.ply")
    pts, _ = read_points(tmp_path / "e.ply")
    assert pts.shape == (0, 3)
    export_points(np.zeros((0, 3)), tmp_path / "e.xyz")
    assert (tmp_path / "e.xyz").read_text() == ""


def test_default_tau():
    assert DEFAULT_TAU == 1 / 512

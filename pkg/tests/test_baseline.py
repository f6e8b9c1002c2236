import numpy as np
import pytest

from uodf.baseline import mc_gep_from_sdf, udf_gradient_sign_gep
from uodf.field import ScalarFieldGrid, compute_sdf_gt, compute_udf_gt, corner_points
from uodf.grid import GridSpec


def test_linear_crossing_formula():
    g = GridSpec(2)
    v = np.ones((2, 2, 2))
    v[0, 0, 0], v[1, 0, 0] = -0.3, 0.1
    pts = mc_gep_from_sdf(ScalarFieldGrid(v, "sdf", g))
    # x edge from (-1,-1,-1) to (1,-1,-1): t = 0.75
    assert any(np.allclose(p, [0.5, -1, -1]) for p in pts)
    # y and z edges from the negative corner cross at t = 0.3 / 1.3
    assert len(pts) == 3


def test_same_sign_edges_emit_nothing():
    g = GridSpec(3)
    assert len(mc_gep_from_sdf(ScalarFieldGrid(np.ones((3, 3, 3)), "sdf", g))) == 0


def test_affine_field_exact():
    g = GridSpec(17)
    p = corner_points(g)
    n = np.array([1.0, 1.0, 0.0]) / np.sqrt(2)
    sdf = p @ n - 0.1
    pts = mc_gep_from_sdf(ScalarFieldGrid(sdf, "sdf", g))
    assert len(pts) > 0
    assert np.abs(pts @ n - 0.1).max() < 1e-12


def test_sphere_interpolation_error_band(sphere):
    g = GridSpec(65)
    pts = mc_gep_from_sdf(compute_sdf_gt(sphere, g))
    err = sphere.udf(pts)
    assert err.max() > 0
    assert 0 < err.mean() < g.spacing ** 2


def test_udf_plate_midway():
    g = GridSpec(4)  # corners -1, -1/3, 1/3, 1
    z = corner_points(g)[..., 2]
    pts = udf_gradient_sign_gep(ScalarFieldGrid(np.abs(z), "udf", g))
    assert len(pts) == 16
    assert np.abs(pts[:, 2]).max() < 1e-15


def test_udf_zero_magnitude_tie():
    g = GridSpec(4)
    v = np.zeros((4, 4, 4))
    v[:, :, 0] = 1.0
    v[:, :, 3] = 1.0
    # gradients at z=-1/3 and z=1/3 oppose; both magnitudes are 0 -> midpoint
    pts = udf_gradient_sign_gep(ScalarFieldGrid(v, "udf", g))
    mid = pts[np.isclose(pts[:, 2], 0.0)]
    assert len(mid) == 16


def test_udf_baseline_worse_than_mc(sphere):
    g = GridSpec(65)
    mc = sphere.udf(mc_gep_from_sdf(compute_sdf_gt(sphere, g)))
    ug = sphere.udf(udf_gradient_sign_gep(compute_udf_gt(sphere, g)))
    assert ug.mean() > 0
    assert ug.mean() > mc.mean()


def test_kind_and_size_checks():
    g = GridSpec(2)
    with pytest.raises(ValueError):
        mc_gep_from_sdf(ScalarFieldGrid(np.ones((2, 2, 2)), "udf", g))
    with pytest.raises(ValueError):
        udf_gradient_sign_gep(ScalarFieldGrid(np.ones((2, 2, 2)), "udf", g))
    with pytest.raises(ValueError):
        udf_gradient_sign_gep(ScalarFieldGrid(np.ones((2, 2, 2)), "sdf", g))

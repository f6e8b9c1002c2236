import numpy as np
import pytest

from uodf.mesh import (EmptyMeshError, FaceIndexError, MeshParseError, TriangleMesh, UnsupportedFormatError,
                       load_mesh, normalize_mesh, save_obj, save_ply)
from uodf.shapes import box_mesh, icosphere

CUBE_OBJ = """# unit cube
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 4 3 2
f 5 6 7 8
f 1 2 6 5
f 2 3 7 6
f 3 4 8 7
f 4 1 5 8
"""


def test_unit_cube_obj(tmp_path):
    p = tmp_path / "cube.obj"
    p.write_text(CUBE_OBJ)
    m = load_mesh(p)
    assert len(m.vertices) == 8 and len(m.triangles) == 12
    lo, hi = m.bbox
    assert lo.tolist() == [0, 0, 0] and hi.tolist() == [1, 1, 1]
    assert not m.degenerate.any()


def test_obj_negative_indices_and_slashes(tmp_path):
    p = tmp_path / "tri.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf -3//1 -2//1 -1//1\n")
    assert load_mesh(p).triangles.tolist() == [[0, 1, 2]]


def test_face_index_out_of_range(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text(CUBE_OBJ + "f 1 2 9\n")
    with pytest.raises(FaceIndexError, match="9|8"):
        load_mesh(p)


def test_ply_degenerate_flagged(tmp_path):
    cube = box_mesh((0, 0, 0), (1, 1, 1))
    tris = cube.triangles.copy()
    tris[5] = [0, 0, 1]
    for binary in (True, False):
        p = tmp_path / f"cube_{binary}.ply"
        save_ply(TriangleMesh(cube.vertices, tris), p, binary=binary)
        m = load_mesh(p)
        assert len(m.triangles) == 12
        assert m.degenerate.sum() == 1 and m.degenerate[5]


def test_obj_round_trip(tmp_path):
    m = icosphere(1)
    save_obj(m, tmp_path / "s.obj")
    m2 = load_mesh(tmp_path / "s.obj")
    assert np.array_equal(m.vertices, m2.vertices)
    assert np.array_equal(m.triangles, m2.triangles)


def test_parse_error_names_line(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 zero\n")
    with pytest.raises(MeshParseError, match="1"):
        load_mesh(p)


def test_empty_and_unsupported(tmp_path):
    p = tmp_path / "empty.obj"
    p.write_text("# nothing\n")
    with pytest.raises(EmptyMeshError):
        load_mesh(p)
    q = tmp_path / "m.stl"
    q.write_text("solid")
    with pytest.raises(UnsupportedFormatError):
        load_mesh(q)
    with pytest.raises(FileNotFoundError):
        load_mesh(tmp_path / "missing.obj")


def test_all_degenerate_rejected(tmp_path):
    p = tmp_path / "flat.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n")
    with pytest.raises(EmptyMeshError):
        load_mesh(p)


def test_normalize_cube():
    m = normalize_mesh(box_mesh((-1, -1, -1), (1, 1, 1)))
    assert np.allclose(np.abs(m.vertices), 0.9 / np.sqrt(3), atol=1e-15)
    assert abs(np.linalg.norm(m.vertices, axis=1).max() - 0.9) < 1e-12


def test_normalize_idempotent():
    m = normalize_mesh(icosphere(2, 3.0, (1, 2, 3)))
    m2 = normalize_mesh(m)
    assert np.abs(m.vertices - m2.vertices).max() < 1e-12


def test_normalize_offset_sphere():
    m = normalize_mesh(icosphere(3, 2.0, (5, 0, 0)))
    r = np.linalg.norm(m.vertices, axis=1)
    assert abs(r.max() - 0.9) < 1e-12
    assert np.allclose(r, 0.9, atol=1e-12)  # icosphere vertices lie on the sphere


def test_normalize_all_degenerate():
    m = TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
    with pytest.raises(EmptyMeshError):
        normalize_mesh(m)

import numpy as np
import pytest

from quadpose.errors import EmptyMesh, ParseError
from quadpose.mesh import load_obj, make_mesh, parse_obj, procedural_mesh, save_obj, unit_cube

CUBE_TRIS = """\
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 4 8 7
f 4 7 3
f 1 5 8
f 1 8 4
f 2 3 7
f 2 7 6
"""

CUBE_QUADS = """\
# quads with texture/normal indices
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
vn 0 0 1
f 1/1/1 4/1/1 3/1/1 2/1/1
f 5 6 7 8
f 1 2 6 5
f 4 8 7 3
f 1 5 8 4
f 2 3 7 6
"""


def test_unit_cube_obj(tmp_path):
    p = tmp_path / "cube.obj"
    p.write_text(CUBE_TRIS)
    m = load_obj(p)
    assert m.vertices.shape == (8, 3)
    assert m.triangles.shape == (12, 3)
    # recentred on the bounding-box centre
    assert np.allclose(m.vertices.min(0) + m.vertices.max(0), 0)
    assert m.bounding_radius == pytest.approx(np.sqrt(3) / 2)


def test_quads_fan_triangulated():
    m = parse_obj(CUBE_QUADS)
    assert m.triangles.shape == (12, 3)


def test_zero_index_rejected():
    with pytest.raises(ParseError):
        parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n")


def test_out_of_range_and_malformed():
    with pytest.raises(ParseError):
        parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n")
    with pytest.raises(ParseError):
        parse_obj("v 0 0\n")
    with pytest.raises(ParseError):
        parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2\n")


def test_negative_indices_relative():
    m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n")
    assert m.triangles.tolist() == [[0, 1, 2]]


def test_empty_and_degenerate():
    with pytest.raises(EmptyMesh):
        parse_obj("# nothing\n")
    with pytest.raises(EmptyMesh):
        make_mesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])


def test_degenerate_faces_filtered():
    m = make_mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]], [[0, 1, 2], [0, 1, 3]])
    assert len(m.triangles) == 1


def test_missing_file_names_path(tmp_path):
    with pytest.raises(ParseError, match="nope.obj"):
        load_obj(tmp_path / "nope.obj")


def test_save_load_round_trip(tmp_path):
    m = procedural_mesh(3)
    save_obj(m, tmp_path / "m.obj")
    back = load_obj(tmp_path / "m.obj")
    assert np.array_equal(back.triangles, m.triangles)
    assert np.abs(back.vertices - m.vertices).max() < 1e-8


def test_procedural_deterministic_and_valid():
    for seed in range(6):
        a, b = procedural_mesh(seed), procedural_mesh(seed)
        assert np.array_equal(a.vertices, b.vertices)
        assert a.bounding_radius > 0
    assert not np.array_equal(procedural_mesh(0).vertices, procedural_mesh(1).vertices)
    with pytest.raises(ValueError):
        procedural_mesh(0, "sofa")


def test_unit_cube_helper():
    c = unit_cube()
    assert c.triangles.shape == (12, 3)
    # outward normals
    centres = c.vertices[c.triangles].mean(1)
    assert np.all(np.einsum("ij,ij->i", c.face_normals(), centres) > 0)

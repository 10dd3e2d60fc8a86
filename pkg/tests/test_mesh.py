import numpy as np
import pytest

from divflow.mesh import (Mesh, PointLocationError, build_lshape_mesh, build_rectangle_mesh, dump_mesh,
                          is_conforming, load_mesh, locate_point, refine_marked, refine_uniform)


def shoelace_area(vertices, triangles):
    """Independent signed-area sum."""
    total = 0.0
    for a, b, c in triangles:
        (x0, y0), (x1, y1), (x2, y2) = vertices[a], vertices[b], vertices[c]
        total += 0.5 * ((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0))
    return total


def check_topology(m):
    counts = np.zeros(m.ne, dtype=int)
    for t in range(m.nt):
        for e in m.tri_edges[t]:
            counts[e] += 1
    bnd = m.edge_tris[:, 1] < 0
    assert np.all(counts[bnd] == 1)
    assert np.all(counts[~bnd] == 2)
    assert np.all(m.areas > 0)
    assert np.all(m.diameters > 0) and np.all(m.edge_lengths > 0)
    assert is_conforming(m)


def test_rectangle_single_cell():
    m = build_rectangle_mesh(1, 1, 1, 1)
    assert (m.nt, m.nv, m.ne) == (2, 4, 5)
    check_topology(m)


def test_rectangle_euler_formula():
    m = build_rectangle_mesh(1, 1, 2, 2)
    assert m.nt == 8 and m.nv == 9
    assert m.nv - m.ne + (m.nt + 1) == 2


def test_rectangle_example4_area():
    m = build_rectangle_mesh(40, 300, 8, 60)
    assert np.all(m.areas > 0)
    assert shoelace_area(m.vertices, m.triangles) == pytest.approx(12000.0, rel=1e-14)
    assert m.areas.sum() == pytest.approx(12000.0, rel=1e-14)


def test_rectangle_tags_sides():
    m = build_rectangle_mesh(2, 1, 3, 2)
    b = m.boundary_edges
    mid = m.vertices[m.edges[b]].mean(axis=1)
    tags = m.edge_tags[b]
    assert np.all(tags[np.isclose(mid[:, 1], 0)] == 1)
    assert len(set(tags.tolist())) == 4


@pytest.mark.parametrize("bad", [(0, 1, 1, 1), (1, -1, 1, 1), (1, 1, 0, 1), (1, 1, 1, -2)])
def test_rectangle_rejects(bad):
    with pytest.raises(ValueError):
        build_rectangle_mesh(*bad)


def test_lshape_n1():
    m = build_lshape_mesh(1)
    assert m.nt == 6
    assert m.areas.sum() == pytest.approx(3.0, abs=1e-14)
    check_topology(m)


def test_lshape_n2_area_oracle():
    m = build_lshape_mesh(2)
    assert abs(shoelace_area(m.vertices, m.triangles) - 3.0) < 1e-14


@pytest.mark.parametrize("n", [1, 2, 3])
def test_lshape_corner_vertex(n):
    m = build_lshape_mesh(n)
    assert np.any(np.all(np.abs(m.vertices) < 1e-15, axis=1))
    assert np.any(m.edge_tags == 5)


def test_lshape_rejects():
    with pytest.raises(ValueError):
        build_lshape_mesh(0)


def test_refine_uniform():
    m = build_rectangle_mesh(1, 1, 1, 1)
    r = refine_uniform(m)
    assert r.nt == 8
    assert r.diameters.max() == pytest.approx(m.diameters.max() / 2, abs=1e-14)
    assert abs(shoelace_area(r.vertices, r.triangles) - 1.0) < 1e-14
    check_topology(r)


def test_refine_uniform_keeps_tags():
    m = refine_uniform(build_lshape_mesh(1))
    assert sorted(set(m.edge_tags[m.boundary_edges].tolist())) == [1, 2, 3, 4, 5]


def test_refine_marked_empty():
    m = build_rectangle_mesh(1, 1, 2, 2)
    assert refine_marked(m, set()) is m


def test_refine_marked_all():
    m = build_rectangle_mesh(1, 1, 2, 2)
    r = refine_marked(m, set(range(m.nt)))
    assert np.all(np.bincount(r.parent, minlength=m.nt) >= 2)
    check_topology(r)


def test_refine_marked_single_count():
    # every triangle's refinement edge is its cell diagonal, shared with the partner
    # whose refinement edge is the same diagonal: closure bisects exactly that pair
    m = build_rectangle_mesh(1, 1, 2, 2)
    for t in range(m.nt):
        r = refine_marked(m, {t})
        assert r.nt == 10
        check_topology(r)


def test_refine_marked_rejects_bad_index():
    m = build_rectangle_mesh(1, 1, 1, 1)
    with pytest.raises(IndexError):
        refine_marked(m, [5])


def test_bisection_shape_regularity_and_area():
    m0 = build_lshape_mesh(1, pattern="crossed")
    m = m0
    for _ in range(10):
        # refine towards the reentrant corner
        d = np.linalg.norm(m.centroids, axis=1)
        m = refine_marked(m, np.flatnonzero(d <= np.sort(d)[min(5, m.nt - 1)]))
        check_topology(m)
        assert abs(m.areas.sum() - 3.0) < 3e-13
    assert m.min_angle() >= m0.min_angle() / 2


def test_random_refinement_conforming():
    rng = np.random.default_rng(0)
    m = build_rectangle_mesh(1, 1, 3, 3)
    for _ in range(6):
        m = refine_marked(m, rng.choice(m.nt, size=max(1, m.nt // 5), replace=False))
        check_topology(m)
    assert abs(m.areas.sum() - 1.0) < 1e-13


def test_locate_centroid():
    m = build_rectangle_mesh(1, 1, 2, 2)
    for t in range(m.nt):
        tri, lam = locate_point(m, m.centroids[t])
        assert tri == t
        assert np.allclose(lam, 1 / 3, atol=1e-14)


def test_locate_vertex_tie_break():
    m = build_rectangle_mesh(1, 1, 2, 2)
    tri, lam = locate_point(m, (0.5, 0.5))
    adjacent = np.flatnonzero(np.any(m.triangles == 4, axis=1))
    assert tri == adjacent.min()
    assert np.isclose(lam.max(), 1.0, atol=1e-14)


def test_locate_round_trip():
    rng = np.random.default_rng(1)
    m = refine_marked(build_lshape_mesh(2), [0, 3, 7])
    pts = rng.uniform(-1, 1, (200, 2))
    pts = pts[~((pts[:, 0] > 0) & (pts[:, 1] > 0))]
    tri, lam = m.locate(pts)
    v = m.vertices[m.triangles[tri]]
    rec = np.einsum("nk,nka->na", lam, v)
    assert np.abs(rec - pts).max() < 1e-12
    assert lam.min() >= -1e-12 and lam.max() <= 1 + 1e-12


def test_locate_outside():
    m = build_lshape_mesh(1)
    with pytest.raises(PointLocationError):
        locate_point(m, (0.5, 0.5))


def test_dump_load_round_trip(tmp_path):
    m = refine_marked(build_rectangle_mesh(2, 1, 2, 2), [1])
    p = tmp_path / "mesh.txt"
    dump_mesh(m, p)
    first = p.read_text().splitlines()[0]
    assert first == f"ndim=2 nv={m.nv} nt={m.nt}"
    r = load_mesh(p)
    assert np.array_equal(r.vertices, m.vertices)
    assert np.array_equal(r.triangles, m.triangles)


def test_mesh_rejects_degenerate():
    with pytest.raises(ValueError):
        Mesh([[0, 0], [1, 0], [2, 0]], [[0, 1, 2]])


def test_refine_marked_boolean_mask():
    m = build_rectangle_mesh(1, 1, 2, 2)
    mask = np.zeros(m.nt, dtype=bool)
    mask[[3, 6]] = True
    a = refine_marked(m, mask)
    b = refine_marked(m, [3, 6])
    assert np.array_equal(a.triangles, b.triangles)
    assert refine_marked(m, np.zeros(m.nt, dtype=bool)) is m
    with pytest.raises(IndexError):
        refine_marked(m, np.ones(3, dtype=bool))


def test_two_sweeps_match_uniform_count():
    from divflow.mesh import refine_marked_sweeps
    m = build_lshape_mesh(1, pattern="crossed")
    r = refine_marked_sweeps(m, np.ones(m.nt, dtype=bool))
    assert r.nt == 4 * m.nt
    assert r.diameters.max() == pytest.approx(m.diameters.max() / 2)
    assert np.array_equal(np.bincount(r.parent, minlength=m.nt), np.full(m.nt, 4))
    check_topology(r)


def test_sweeps_refine_marked_descendants():
    from divflow.mesh import refine_marked_sweeps
    m = build_rectangle_mesh(1, 1, 4, 4)
    r = refine_marked_sweeps(m, [5])
    assert np.sum(r.parent == 5) >= 4
    check_topology(r)
    assert refine_marked_sweeps(m, []) is m

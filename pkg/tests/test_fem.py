import numpy as np
import pytest
import sympy
from numpy.polynomial.legendre import leggauss
from scipy.special import eval_legendre

from divflow.analysis import broken_h1_norm, h1_error
from divflow.fem import (DiscreteField, bdm_interpolate, bdm_space, eval_basis, l2_project,
                         lagrange_interpolate, lagrange_reference_nodes, lagrange_space, pressure_space,
                         transfer_field)
from divflow.mesh import Mesh, build_rectangle_mesh, refine_marked, refine_uniform
from divflow.quadrature import quadrature_rule


def perturbed(nx=3, seed=0):
    m = build_rectangle_mesh(1.0, 1.0, nx, nx)
    v = m.vertices.copy()
    inner = (v.min(axis=1) > 1e-12) & (v.max(axis=1) < 1 - 1e-12)
    v[inner] += np.random.default_rng(seed).uniform(-0.15, 0.15, (inner.sum(), 2)) / nx
    return Mesh(v, m.triangles, m.boundary_tag_dict())


def reference_mesh():
    return Mesh([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [[0, 1, 2]])


# -- quadrature ---------------------------------------------------------------------------
def test_quadrature_triangle_area():
    assert quadrature_rule("triangle", 1).weights.sum() == pytest.approx(0.5, abs=1e-15)


def test_quadrature_edge_cubic():
    r = quadrature_rule("edge", 3)
    assert abs(np.sum(r.weights * r.ref_points ** 3) - 0.25) < 1e-15


def test_quadrature_x2y2_symbolic_oracle():
    x, y = sympy.symbols("x y")
    exact = sympy.integrate(sympy.integrate(x ** 2 * y ** 2, (y, 0, 1 - x)), (x, 0, 1))
    assert exact == sympy.Rational(1, 180)
    r = quadrature_rule("triangle", 6)
    p = r.ref_points
    assert abs(np.sum(r.weights * p[:, 0] ** 2 * p[:, 1] ** 2) - float(exact)) < 1e-15


@pytest.mark.parametrize("entity", ["triangle", "edge"])
def test_quadrature_exact_all_monomials(entity):
    from math import factorial
    for d in range(13):
        r = quadrature_rule(entity, d)
        assert np.allclose(r.points.sum(axis=1), 1.0)
        for a in range(d + 1):
            if entity == "edge":
                assert abs(np.sum(r.weights * r.ref_points ** a) - 1 / (a + 1)) < 1e-15
                continue
            for b in range(d + 1 - a):
                val = np.sum(r.weights * r.ref_points[:, 0] ** a * r.ref_points[:, 1] ** b)
                assert abs(val - factorial(a) * factorial(b) / factorial(a + b + 2)) < 1e-15


def test_quadrature_degree_too_high():
    with pytest.raises(ValueError):
        quadrature_rule("triangle", 13)


# -- basis -----------------------------------------------------------------------------------
def edge_moment_matrix(space, n=10):
    """Independent oracle: normal Legendre moments of all global basis functions."""
    mesh = space.mesh
    k = space.degree
    x, w = leggauss(n)
    t = 0.5 * (x + 1)
    out = np.zeros((mesh.ne * (k + 1), space.ndofs))
    for e in range(mesh.ne):
        a, b = mesh.vertices[mesh.edges[e]]
        L = np.linalg.norm(b - a)
        X = a + t[:, None] * (b - a)
        nrm = mesh.edge_normals[e]
        tri = mesh.edge_tris[e, 0]
        J = mesh.jacobians[tri]
        xhat = np.linalg.solve(J, (X - mesh.vertices[mesh.triangles[tri, 0]]).T).T
        val, _ = eval_basis(space, tri, xhat)
        for j in range(k + 1):
            wt = 0.5 * w * L * eval_legendre(j, 2 * t - 1)
            out[e * (k + 1) + j, space.cell_dofs[tri]] += np.einsum("q,qia,a->i", wt, val, nrm)
    return out


def test_bdm1_dof_duality_reference():
    V = bdm_space(reference_mesh(), 1)
    assert np.abs(edge_moment_matrix(V) - np.eye(V.ndofs)).max() < 1e-13


@pytest.mark.parametrize("k", [1, 2])
def test_bdm_edge_duality_global(k):
    V = bdm_space(perturbed(), k)
    D = edge_moment_matrix(V)
    ne = V.mesh.ne * (k + 1)
    assert np.abs(D[:, :ne] - np.eye(ne)).max() < 1e-12
    if k == 2:
        assert np.abs(D[:, ne:]).max() < 1e-12


@pytest.mark.parametrize("k", [1, 2])
def test_bdm_interpolates_own_basis(k):
    V = bdm_space(perturbed(2), k)
    for j in (0, 3, V.ndofs - 1):
        e = np.zeros(V.ndofs)
        e[j] = 1.0
        f = DiscreteField(V, e)
        assert np.abs(transfer_field(f, V).coeffs - e).max() < 1e-12


def test_lagrange_p2_kronecker():
    S = lagrange_space(reference_mesh(), 2)
    val, _ = eval_basis(S, 0, lagrange_reference_nodes(2))
    assert np.abs(val - np.eye(6)).max() < 1e-14


def test_bdm2_divergence_piola():
    mesh = perturbed(2, seed=3)
    V = bdm_space(mesh, 2)
    rng = np.random.default_rng(0)
    xhat = rng.dirichlet([1, 1, 1], 10)[:, 1:]
    _, rgrad, _ = V.ref.tabulate(xhat)
    rdiv = rgrad[..., 0, 0] + rgrad[..., 1, 1]
    h = 1e-5
    for t in range(mesh.nt):
        _, grad = eval_basis(V, t, xhat)
        div = grad[..., 0, 0] + grad[..., 1, 1]
        expect = rdiv * V.cell_signs[t][None, :] / mesh.dets[t]
        assert np.abs(div - expect).max() < 1e-13 * max(1.0, np.abs(expect).max())
        # finite-difference oracle on the physical field
        J = mesh.jacobians[t]
        Ji = mesh.inv_jacobians[t]
        fd = np.zeros_like(div)
        for a in range(2):
            dx = np.zeros(2)
            dx[a] = h
            vp, _ = eval_basis(V, t, xhat + Ji @ dx)
            vm, _ = eval_basis(V, t, xhat - Ji @ dx)
            fd += (vp[..., a] - vm[..., a]) / (2 * h)
        assert np.abs(fd - div).max() < 1e-6 * max(1.0, np.abs(div).max())


# -- interpolation and projection -------------------------------------------------------------
def sample_points(mesh, n=50, seed=1):
    rng = np.random.default_rng(seed)
    tri = rng.integers(0, mesh.nt, n)
    lam = rng.dirichlet([1, 1, 1], n)
    return np.einsum("nk,nka->na", lam, mesh.vertices[mesh.triangles[tri]])


@pytest.mark.parametrize("k", [1, 2])
def test_bdm_constant_reproduced(k):
    mesh = perturbed()
    u = bdm_interpolate(bdm_space(mesh, k), lambda x, y: (0.3 + 0 * x, -1.2 + 0 * x))
    P = sample_points(mesh)
    assert np.abs(u(P) - np.array([0.3, -1.2])).max() < 1e-13


@pytest.mark.parametrize("k", [1, 2])
def test_bdm_polynomial_reproduced(k):
    mesh = perturbed()
    f = (lambda x, y: (x * y + 2 * y ** 2 - x, 1 - x ** 2 + 3 * x * y)) if k == 2 else \
        (lambda x, y: (1 + 2 * x - y, 0.5 * x + 3 * y))
    u = bdm_interpolate(bdm_space(mesh, k), f)
    P = sample_points(mesh)
    assert np.abs(u(P) - np.column_stack(f(P[:, 0], P[:, 1]))).max() < 1e-12


@pytest.mark.parametrize("k", [1, 2])
def test_commuting_diagram(k):
    mesh = perturbed(4)
    f = lambda x, y: (np.sin(2 * x + y) * np.cos(y), np.exp(0.5 * x) * np.sin(3 * y))
    div = lambda x, y: 2 * np.cos(2 * x + y) * np.cos(y) + 3 * np.exp(0.5 * x) * np.cos(3 * y)
    u = bdm_interpolate(bdm_space(mesh, k), f)
    q = l2_project(pressure_space(mesh, k), div)
    xy = quadrature_rule("triangle", 5).ref_points
    assert np.abs(u.divergence_cells(xy) - q.eval_cells(xy, derivs=0)).max() < 1e-11


def test_lagrange_interpolate_one_and_linear():
    mesh = perturbed()
    for k in (1, 2):
        S = lagrange_space(mesh, k)
        assert np.all(lagrange_interpolate(S, lambda x, y: 1.0 + 0 * x).coeffs == 1.0)
    S = lagrange_space(mesh, 1)
    s = lagrange_interpolate(S, lambda x, y: x + y)
    P = sample_points(mesh)
    assert np.abs(s(P) - P.sum(axis=1)).max() < 1e-14


def test_lagrange_interpolation_h1_rate():
    f = lambda x, y: np.sin(np.pi * x) * np.cos(y)
    g = lambda x, y: (np.pi * np.cos(np.pi * x) * np.cos(y), -np.sin(np.pi * x) * np.sin(y))
    mesh = build_rectangle_mesh(1, 1, 4, 4)
    errs = []
    for _ in range(3):
        S = lagrange_space(mesh, 1)
        errs.append(h1_error(lagrange_interpolate(S, f), f, g))
        mesh = refine_uniform(mesh)
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(np.abs(ratios - 2.0) < 0.15)


@pytest.mark.parametrize("k", [1, 2])
def test_l2_project_polynomial_exact(k):
    mesh = perturbed()
    f = (lambda x, y: 2 - x + 3 * y) if k == 2 else (lambda x, y: 0.7 + 0 * x)
    q = l2_project(pressure_space(mesh, k), f)
    P = sample_points(mesh)
    assert np.abs(q(P) - f(P[:, 0], P[:, 1])).max() < 1e-13


@pytest.mark.parametrize("k", [1, 2])
def test_l2_project_orthogonality_and_mean(k):
    mesh = perturbed()
    Q = pressure_space(mesh, k)
    q = l2_project(Q, lambda x, y: np.sin(x))
    r = quadrature_rule("triangle", 12)
    phi = Q.tabulate(r.ref_points, derivs=0)
    X = mesh.vertices[mesh.triangles[:, 0]][:, None] + np.einsum("tab,qb->tqa", mesh.jacobians, r.ref_points)
    w = r.weights[None] * mesh.dets[:, None]
    res = np.sin(X[..., 0]) - q.eval_cells(r.ref_points, derivs=0)
    assert np.abs(np.einsum("tq,tq,tqi->ti", w, res, phi)).max() < 1e-12
    exact_mean = 1 - np.cos(1.0)
    assert abs(np.sum(w * q.eval_cells(r.ref_points, derivs=0)) - exact_mean) < 1e-12


# -- transfer -----------------------------------------------------------------------------------
@pytest.mark.parametrize("kind", ["BDM", "P", "DG"])
def test_transfer_identity(kind):
    mesh = perturbed(2)
    sp_ = {"BDM": bdm_space, "P": lagrange_space, "DG": pressure_space}[kind](mesh, 2)
    f = DiscreteField(sp_, np.random.default_rng(2).standard_normal(sp_.ndofs))
    assert np.abs(transfer_field(f, sp_).coeffs - f.coeffs).max() < 1e-12


def test_transfer_p1_nested_exact():
    mesh = perturbed(2)
    fine = refine_marked(mesh, [0, 2, 5])
    s = DiscreteField(lagrange_space(mesh, 1), np.random.default_rng(4).standard_normal(mesh.nv))
    t = transfer_field(s, lagrange_space(fine, 1))
    P = sample_points(fine, 80)
    assert np.abs(t(P) - s(P)).max() < 1e-12


@pytest.mark.parametrize("k", [1, 2])
def test_transfer_round_trip_polynomials(k):
    coarse = perturbed(2)
    fine = refine_uniform(coarse)
    cases = [
        (bdm_space, lambda x, y: (x ** k - y, 1 + x * y ** (k - 1))),
        (lagrange_space, lambda x, y: x ** k + 2 * y - x * y ** (k - 1)),
        (pressure_space, lambda x, y: 1 + (k - 1) * (x - 2 * y)),
    ]
    for make, f in cases:
        Sc, Sf = make(coarse, k), make(fine, k)
        interp = bdm_interpolate if Sc.kind == "BDM" else (lagrange_interpolate if Sc.kind == "P" else l2_project)
        a = interp(Sc, f)
        back = transfer_field(transfer_field(a, Sf), Sc)
        assert np.abs(back.coeffs - a.coeffs).max() < 1e-11


# -- invariants -----------------------------------------------------------------------------------
@pytest.mark.parametrize("k", [1, 2])
def test_normal_continuity(k):
    mesh = perturbed(3)
    V = bdm_space(mesh, k)
    u = DiscreteField(V, np.random.default_rng(5).standard_normal(V.ndofs))
    x, _ = leggauss(5)
    t = 0.5 * (x + 1)
    for e in mesh.interior_edges:
        a, b = mesh.vertices[mesh.edges[e]]
        X = a + t[:, None] * (b - a)
        vals = []
        for side in range(2):
            tri = mesh.edge_tris[e, side]
            xhat = np.linalg.solve(mesh.jacobians[tri], (X - mesh.vertices[mesh.triangles[tri, 0]]).T).T
            val, _ = eval_basis(V, tri, xhat)
            vals.append(np.einsum("qia,i->qa", val, u.coeffs[V.cell_dofs[tri]]) @ mesh.edge_normals[e])
        assert np.abs(vals[0] - vals[1]).max() < 1e-12


@pytest.mark.parametrize("k", [1, 2])
def test_patch_broken_norm(k):
    mesh = perturbed(3)
    if k == 1:
        f = lambda x, y: (1 + 2 * x - y, 0.5 * x + 3 * y)
        g = lambda x, y: ((2 + 0 * x, -1 + 0 * x), (0.5 + 0 * x, 3 + 0 * x))
    else:
        f = lambda x, y: (x * y + y ** 2, 1 - x ** 2)
        g = lambda x, y: ((y, x + 2 * y), (-2 * x, 0 * x))
    u = bdm_interpolate(bdm_space(mesh, k), f)
    assert broken_h1_norm(u, f, g) < 1e-11


@pytest.mark.parametrize("k", [1, 2])
def test_divergence_in_pressure_space(k):
    mesh = perturbed(2)
    V, Q = bdm_space(mesh, k), pressure_space(mesh, k)
    fit = quadrature_rule("triangle", 4).ref_points
    check = np.random.default_rng(6).dirichlet([1, 1, 1], 7)[:, 1:]
    for t in range(mesh.nt):
        _, g1 = eval_basis(V, t, fit)
        q1, _ = eval_basis(Q, t, fit)
        coef, *_ = np.linalg.lstsq(q1, g1[..., 0, 0] + g1[..., 1, 1], rcond=None)
        _, g2 = eval_basis(V, t, check)
        q2, _ = eval_basis(Q, t, check)
        assert np.abs(q2 @ coef - (g2[..., 0, 0] + g2[..., 1, 1])).max() < 1e-12 * max(1, np.abs(coef).max())


def test_dof_maps():
    mesh = perturbed(2)
    Q = pressure_space(mesh, 2)
    assert len(np.unique(Q.cell_dofs)) == Q.cell_dofs.size
    V = bdm_space(mesh, 2)
    for e in mesh.interior_edges:
        t0, t1 = mesh.edge_tris[e]
        assert len(set(V.cell_dofs[t0]) & set(V.cell_dofs[t1])) == 3
    S = lagrange_space(mesh, 2)
    assert S.ndofs == mesh.nv + mesh.ne


@pytest.mark.parametrize("kind", ["bdm", "lagrange"])
def test_eval_cells_matches_basis_contraction(kind):
    m = build_rectangle_mesh(1.0, 1.0, 3, 2)
    space = bdm_space(m, 2) if kind == "bdm" else lagrange_space(m, 2)
    rng = np.random.default_rng(3)
    f = DiscreteField(space, rng.standard_normal(space.ndofs))
    xh = np.array([[0.2, 0.3], [0.6, 0.1], [0.1, 0.1]])
    loc = f.local(None)
    tabs = space.tabulate(xh, derivs=2)
    got = f.eval_cells(xh, derivs=2)
    for t, g in zip(tabs, got):
        ref = np.einsum("tqb...,tb->tq...", t, loc)
        assert np.allclose(g, ref, rtol=1e-12, atol=1e-12)
    tris = np.array([0, 4, 7])
    tabs = space.tabulate(xh, tris=tris, derivs=1, pointwise=True)
    got = f.eval_cells(xh, tris=tris, derivs=1, pointwise=True)
    for t, g in zip(tabs, got):
        ref = np.einsum("nb...,nb->n...", t, f.local(tris))
        assert np.allclose(g, ref, rtol=1e-12, atol=1e-12)

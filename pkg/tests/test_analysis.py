import math

import numpy as np
import pytest

from divflow.analysis import (CSV_COLUMNS, RunRecord, broken_h1_norm, broken_h1_parts, divergence_sup,
                              error_norms, h1_error, l2_error, rate, read_csv)
from divflow.fem import (DiscreteField, bdm_interpolate, bdm_space, l2_project, lagrange_interpolate,
                         lagrange_space, pressure_space)
from divflow.mesh import build_rectangle_mesh
from divflow.problems import ExactSolution, X, Y, T


@pytest.fixture(scope="module")
def mesh():
    return build_rectangle_mesh(1.0, 1.0, 2, 2)


def test_rate_h_mode():
    assert rate(0.25, 1.0, 0.5, 1.0) == pytest.approx(2.0, abs=1e-15)


def test_rate_dof_mode():
    assert rate(0.5, 1.0, 400, 100, mode="dof") == pytest.approx(1.0, abs=1e-15)


def test_rate_reference_pair():
    # velocity errors on two consecutive uniform meshes with h halved
    assert rate(0.0115, 0.0456, 1.0, 2.0) == pytest.approx(1.994, abs=0.02)


def test_rate_rejects_nonpositive():
    with pytest.raises(ValueError):
        rate(0.0, 1.0, 0.5, 1.0)
    with pytest.raises(ValueError):
        rate(1.0, 2.0, 0.5, 1.0, mode="cells")


def test_zero_field_norms(mesh):
    for k in (1, 2):
        V = bdm_space(mesh, k)
        assert broken_h1_norm(DiscreteField(V, np.zeros(V.ndofs))) == 0.0
        Q = pressure_space(mesh, k)
        assert l2_error(DiscreteField(Q, np.zeros(Q.ndofs))) == 0.0
        S = lagrange_space(mesh, k)
        assert h1_error(DiscreteField(S, np.zeros(S.ndofs))) == 0.0


def test_broken_norm_linear_field_oracle(mesh):
    # u = (x, y): |u|^2 -> 2/3, |grad u|^2 -> 2, boundary trace int |u|^2 ds = 10/3 over edges of length 1/2
    u = bdm_interpolate(bdm_space(mesh, 1), lambda x, y: (x, y))
    l2, h1, jmp = broken_h1_parts(u)
    assert l2 == pytest.approx(2 / 3, rel=1e-13)
    assert h1 == pytest.approx(2.0, rel=1e-13)
    assert jmp == pytest.approx(20 / 3, rel=1e-13)
    assert broken_h1_norm(u) == pytest.approx(math.sqrt(28 / 3), rel=1e-13)
    assert broken_h1_parts(u, boundary=False)[2] == pytest.approx(0.0, abs=1e-13)


def test_exact_field_has_zero_error(mesh):
    u = bdm_interpolate(bdm_space(mesh, 2), lambda x, y: (x * y, -y * y / 2))
    e = broken_h1_norm(u, lambda x, y: (x * y, -y * y / 2), lambda x, y: ((y, x), (0 * x, -y)))
    assert e < 1e-13


def test_norm_homogeneity_and_triangle(mesh):
    V = bdm_space(mesh, 2)
    rng = np.random.default_rng(0)
    a = DiscreteField(V, rng.standard_normal(V.ndofs))
    b = DiscreteField(V, rng.standard_normal(V.ndofs))
    na, nb = broken_h1_norm(a), broken_h1_norm(b)
    assert broken_h1_norm(a * -3.0) == pytest.approx(3 * na, rel=1e-13)
    assert broken_h1_norm(a + b) <= na + nb + 1e-12


def test_l2_and_h1_oracles(mesh):
    S = lagrange_space(mesh, 1)
    s = lagrange_interpolate(S, lambda x, y: x)
    assert h1_error(s) == pytest.approx(math.sqrt(1 / 3 + 1), rel=1e-13)
    assert l2_error(s) == pytest.approx(math.sqrt(1 / 3), rel=1e-13)
    q = l2_project(pressure_space(mesh, 2), lambda x, y: 5.0 + 0 * x)
    assert l2_error(q, subtract_mean=True) < 1e-13
    assert l2_error(q, lambda x, y: 4.0 + 0 * x) == pytest.approx(1.0, rel=1e-13)


def test_divergence_sup(mesh):
    V = bdm_space(mesh, 1)
    assert divergence_sup(bdm_interpolate(V, lambda x, y: (x, 0 * y))) == pytest.approx(1.0, rel=1e-13)
    assert divergence_sup(bdm_interpolate(V, lambda x, y: (x, -y))) < 1e-13


def test_error_norms_polynomial_exact(mesh):
    ex = ExactSolution((X * T, -Y * T), (X - Y) * T, X + Y * T, 1 - X * Y)
    t = 0.7
    u0, p0, s0, c0 = ex.at(t)
    k = 2
    fl = (bdm_interpolate(bdm_space(mesh, k), u0), l2_project(pressure_space(mesh, k), p0),
          lagrange_interpolate(lagrange_space(mesh, k), s0), lagrange_interpolate(lagrange_space(mesh, k), c0))
    ns = error_norms(fl, ex, t)
    assert max(ns.e_u, ns.e_p, ns.e_s, ns.e_c, ns.div_sup) < 1e-12
    ns = error_norms(fl, ex, t + 1.0)
    assert ns.e_s == pytest.approx(math.sqrt(1 / 3 + 1), rel=1e-12)
    assert ns.total() > ns.e_s


def test_record_rates_and_csv(tmp_path):
    rec = RunRecord()
    for lev, (h, e) in enumerate([(1.0, 1.0), (0.5, 0.25), (0.25, 0.0625)]):
        rec.add(level=lev, h=h, dof=10 * 4 ** lev, dt=h, e_u=e, e_p=2 * e, e_s=e, e_c=e, div_sup=0.0,
                newton_iters=3)
    rec.compute_rates()
    assert rec.rows[0]["rate_u"] is None
    assert rec.column("rate_p")[1:] == pytest.approx([2.0, 2.0])
    path = tmp_path / "run.csv"
    rec.write_csv(path)
    header = path.read_text().splitlines()[0]
    assert header == ",".join(CSV_COLUMNS)
    assert header == ("level,h,dof,dt,e_u,rate_u,e_p,rate_p,e_s,rate_s,e_c,rate_c,div_sup,psi,eff,"
                      "newton_iters")
    back = read_csv(path)
    assert back[2]["e_u"] == 0.0625 and back[0]["rate_u"] is None and back[1]["psi"] is None


def test_record_dof_mode():
    rec = RunRecord(mode="dof")
    rec.add(level=0, h=1.0, dof=100, e_u=1.0, e_p=1.0, e_s=1.0, e_c=1.0)
    rec.add(level=1, h=1.0, dof=400, e_u=0.5, e_p=0.5, e_s=0.5, e_c=0.5)
    rec.compute_rates()
    assert rec.rows[1]["rate_u"] == pytest.approx(1.0)

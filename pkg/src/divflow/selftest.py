"""Oracle and property checks run by ``divflow selftest``.

The dense assemblers below loop over cells, edges, quadrature points and basis
pairs with their own Gauss rules and geometry, so they share nothing with the
vectorised kernels in :mod:`divflow.assembly` except basis tabulation.
"""
from __future__ import annotations

import csv
import io
import math
import os
import time
from dataclasses import dataclass
from math import factorial

import numpy as np
from numpy.polynomial.legendre import leggauss

from . import assembly as asm
from .analysis import broken_h1_norm
from .fem import (DiscreteField, bdm_interpolate, bdm_space, eval_basis, l2_project,
                  lagrange_interpolate, lagrange_space, pressure_space)
from .mesh import Mesh, build_rectangle_mesh
from .quadrature import MAX_DEGREE, quadrature_rule

GOLDEN = os.path.join(os.path.dirname(__file__), "data", "golden_selftest.csv")


# -- independent quadrature and geometry ----------------------------------------------------
def _duffy(n=8):
    """Collapsed Gauss-Legendre rule on the reference triangle."""
    x, w = leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    pts, wts = [], []
    for a, wa in zip(x, w):
        for b, wb in zip(x, w):
            pts.append((a, b * (1.0 - a)))
            wts.append(wa * wb * (1.0 - a))
    return np.array(pts), np.array(wts)


def _geometry(mesh, t):
    v = mesh.vertices[mesh.triangles[t]]
    J = np.column_stack([v[1] - v[0], v[2] - v[0]])
    return v, J, abs(np.linalg.det(J))


def _to_ref(mesh, t, X):
    v, J, _ = _geometry(mesh, t)
    return np.linalg.solve(J, (np.atleast_2d(X) - v[0]).T).T


def _edge_rule(mesh, e, n=8):
    a, b = mesh.vertices[mesh.edges[e]]
    x, w = leggauss(n)
    s = 0.5 * (x + 1.0)
    L = math.hypot(*(b - a))
    X = a[None, :] + s[:, None] * (b - a)[None, :]
    tang = (b - a) / L
    nrm = np.array([tang[1], -tang[0]])
    t0 = mesh.edge_tris[e, 0]
    if np.dot(0.5 * (a + b) - mesh.vertices[mesh.triangles[t0]].mean(axis=0), nrm) < 0:
        nrm = -nrm
    return X, 0.5 * w * L, nrm, L


def _side(space, mesh, t, X):
    """Basis values and gradients of cell t at physical points X."""
    return eval_basis(space, t, _to_ref(mesh, t, X))


def _scalar_at(field, t, X):
    sp_ = field.space
    val, grad = _side(sp_, sp_.mesh, t, X)
    loc = field.coeffs[sp_.cell_dofs[t]]
    return val @ loc, np.einsum("nia,i->na", grad, loc)


def _vector_at(field, t, X):
    sp_ = field.space
    val, grad = _side(sp_, sp_.mesh, t, X)
    loc = field.coeffs[sp_.cell_dofs[t]]
    return np.einsum("nia,i->na", val, loc), np.einsum("niab,i->nab", grad, loc)


def _cells(mesh):
    pts, wts = _duffy()
    for t in range(mesh.nt):
        v, J, det = _geometry(mesh, t)
        X = v[0][None, :] + pts @ J.T
        yield t, X, wts * det


# -- dense reference assemblers --------------------------------------------------------------
def dense_mass(space):
    mesh = space.mesh
    M = np.zeros((space.ndofs, space.ndofs))
    for t, X, w in _cells(mesh):
        val, _ = _side(space, mesh, t, X)
        d = space.cell_dofs[t]
        for q in range(len(w)):
            for i in range(space.nb):
                for j in range(space.nb):
                    M[d[i], d[j]] += w[q] * np.sum(val[q, i] * val[q, j])
    return M


def dense_a2(space, diffusivity=1.0):
    mesh = space.mesh
    K = np.zeros((space.ndofs, space.ndofs))
    for t, X, w in _cells(mesh):
        _, grad = _side(space, mesh, t, X)
        d = space.cell_dofs[t]
        for q in range(len(w)):
            for i in range(space.nb):
                for j in range(space.nb):
                    K[d[i], d[j]] += diffusivity * w[q] * np.dot(grad[q, i], grad[q, j])
    return K


def dense_b(uspace, pspace, params):
    mesh = uspace.mesh
    B = np.zeros((pspace.ndofs, uspace.ndofs))
    for t, X, w in _cells(mesh):
        _, grad = _side(uspace, mesh, t, X)
        qv, _ = _side(pspace, mesh, t, X)
        du, dp = uspace.cell_dofs[t], pspace.cell_dofs[t]
        for q in range(len(w)):
            for i in range(pspace.nb):
                for j in range(uspace.nb):
                    B[dp[i], du[j]] += w[q] * qv[q, i] * np.trace(grad[q, j]) / params.rho_m
    return B


def dense_buoyancy(uspace, sspace, params):
    mesh = uspace.mesh
    g = np.asarray(params.gravity)
    F = np.zeros((uspace.ndofs, sspace.ndofs))
    for t, X, w in _cells(mesh):
        val, _ = _side(uspace, mesh, t, X)
        psi, _ = _side(sspace, mesh, t, X)
        du, ds = uspace.cell_dofs[t], sspace.cell_dofs[t]
        for q in range(len(w)):
            for i in range(uspace.nb):
                for m in range(sspace.nb):
                    F[du[i], ds[m]] += w[q] * np.dot(g, val[q, i]) * psi[q, m]
    return F


def dense_c2(advect, shift, sspace):
    mesh = sspace.mesh
    C = np.zeros((sspace.ndofs, sspace.ndofs))
    for t, X, w in _cells(mesh):
        val, grad = _side(sspace, mesh, t, X)
        W = _vector_at(advect, t, X)[0] + np.asarray(shift)[None, :]
        d = sspace.cell_dofs[t]
        for q in range(len(w)):
            for i in range(sspace.nb):
                for j in range(sspace.nb):
                    C[d[i], d[j]] += w[q] * val[q, i] * np.dot(W[q], grad[q, j])
    return C


def dense_a1h(c_field, uspace, params, dirichlet_tags=None):
    """SIP form: volume, interior consistency/symmetry/penalty, Nitsche boundary terms."""
    mesh = uspace.mesh
    nb = uspace.nb
    A = np.zeros((uspace.ndofs, uspace.ndofs))
    for t, X, w in _cells(mesh):
        _, grad = _side(uspace, mesh, t, X)
        nu = params.viscosity(_scalar_at(c_field, t, X)[0], X)
        d = uspace.cell_dofs[t]
        for q in range(len(w)):
            for i in range(nb):
                for j in range(nb):
                    A[d[i], d[j]] += w[q] * nu[q] * np.sum(grad[q, i] * grad[q, j])
    for e in range(mesh.ne):
        t0, t1 = mesh.edge_tris[e]
        X, ds, n, L = _edge_rule(mesh, e)
        nu = params.viscosity(_scalar_at(c_field, t0, X)[0], X)
        if t1 < 0:
            if dirichlet_tags is not None and mesh.edge_tags[e] not in dirichlet_tags:
                continue
            val, grad = _side(uspace, mesh, t0, X)
            jump = [val]
            avg = [np.einsum("niab,b->nia", grad, n)]
            dofs = [uspace.cell_dofs[t0]]
            pen = max(params.a0, params.nitsche if params.nitsche is not None else params.a0)
        else:
            vm, gm = _side(uspace, mesh, t0, X)
            vp, gp = _side(uspace, mesh, t1, X)
            jump = [vm, -vp]
            avg = [0.5 * np.einsum("niab,b->nia", gm, n), 0.5 * np.einsum("niab,b->nia", gp, n)]
            dofs = [uspace.cell_dofs[t0], uspace.cell_dofs[t1]]
            pen = params.a0
        for q in range(len(ds)):
            for a in range(len(dofs)):
                for b in range(len(dofs)):
                    for i in range(nb):
                        for j in range(nb):
                            ji, jj = jump[a][q, i], jump[b][q, j]
                            mi, mj = avg[a][q, i], avg[b][q, j]
                            A[dofs[a][i], dofs[b][j]] += ds[q] * nu[q] * (
                                -np.dot(mj, ji) - np.dot(mi, jj) + pen / L * np.dot(ji, jj))
    return A


def dense_c1h(w_field, uspace):
    """Volume (grad u) w . v minus the upwind interior-facet flux."""
    mesh = uspace.mesh
    nb = uspace.nb
    C = np.zeros((uspace.ndofs, uspace.ndofs))
    for t, X, w in _cells(mesh):
        val, grad = _side(uspace, mesh, t, X)
        W = _vector_at(w_field, t, X)[0]
        d = uspace.cell_dofs[t]
        for q in range(len(w)):
            for i in range(nb):
                for j in range(nb):
                    C[d[i], d[j]] += w[q] * np.dot(grad[q, j] @ W[q], val[q, i])
    for e in mesh.interior_edges:
        t0, t1 = mesh.edge_tris[e]
        X, ds, n, _ = _edge_rule(mesh, e)
        vm, _ = _side(uspace, mesh, t0, X)
        vp, _ = _side(uspace, mesh, t1, X)
        wn = _vector_at(w_field, t0, X)[0] @ n
        dm, dp = uspace.cell_dofs[t0], uspace.cell_dofs[t1]
        for q in range(len(ds)):
            # test side: downwind cell takes the inflow value
            tests = [(dm, min(wn[q], 0.0) * vm[q]), (dp, max(wn[q], 0.0) * vp[q])]
            trials = [(dm, vm[q]), (dp, -vp[q])]
            for di, tv in tests:
                for dj, jv in trials:
                    for i in range(nb):
                        for j in range(nb):
                            C[di[i], dj[j]] -= ds[q] * np.dot(tv[i], jv[j])
    return C


# -- checks -------------------------------------------------------------------------------------
@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _perturbed_square(nx=2):
    """Small mesh with one interior vertex moved off the lattice."""
    m = build_rectangle_mesh(1.0, 1.0, nx, nx)
    v = m.vertices.copy()
    inner = np.flatnonzero((v[:, 0] > 1e-12) & (v[:, 0] < 1 - 1e-12) & (v[:, 1] > 1e-12) & (v[:, 1] < 1 - 1e-12))
    v[inner] += np.array([0.09, -0.06])
    return Mesh(v, m.triangles, m.boundary_tag_dict())


def _affine_viscosity():
    return asm.Viscosity(lambda c, X=None: 1.0 + 0.25 * np.asarray(c),
                         lambda c, X=None: 0.25 * np.ones(np.shape(c)), "affine")


def _maxdiff(A, D):
    """Largest per-entry difference, relative to max(1, |entry|)."""
    A = A.toarray() if hasattr(A, "toarray") else np.asarray(A)
    return float((np.abs(A - D) / np.maximum(1.0, np.abs(D))).max())


def check_dense_oracles(tol=1e-11):
    """Vectorised assemblers equal the dense loop assemblers entry by entry.

    Data are chosen so the assembly rules are exact: affine viscosity only with
    k = 1 and a convecting field whose normal component keeps its sign on each
    edge (the upwind switch is then smooth along every edge).
    """
    rng = np.random.default_rng(7)
    worst = {}
    for k in (1, 2):
        mesh = _perturbed_square()
        V, Q, S = bdm_space(mesh, k), pressure_space(mesh, k), lagrange_space(mesh, k)
        visc = _affine_viscosity() if k == 1 else asm.Viscosity.const(0.7)
        prm = asm.PhysicalParams(viscosity=visc, rho_m=1.5, gravity=(0.3, -1.0), a0=12.0, nitsche=40.0)
        c = DiscreteField(S, rng.uniform(0.0, 1.0, S.ndofs))
        w = bdm_interpolate(V, lambda x, y: (1.0 + 0.3 * x, 0.5 - 0.2 * y))
        adv = DiscreteField(V, rng.standard_normal(V.ndofs))
        pairs = {
            "mass_u": (asm.assemble_mass(V), dense_mass(V)),
            "mass_s": (asm.assemble_mass(S), dense_mass(S)),
            "a2": (asm.assemble_a2(S, 0.4), dense_a2(S, 0.4)),
            "b": (asm.assemble_b(V, Q, prm), dense_b(V, Q, prm)),
            "a1h": (asm.assemble_a1h(c, V, prm, dirichlet_tags=(1, 2)), dense_a1h(c, V, prm, dirichlet_tags=(1, 2))),
            "c1h": (asm.assemble_c1h(w, V), dense_c1h(w, V)),
            "c2": (asm.assemble_c2(adv, (0.0, -0.8), S), dense_c2(adv, (0.0, -0.8), S)),
            "buoyancy": (asm.buoyancy_matrix(V, S, prm), dense_buoyancy(V, S, prm)),
        }
        for name, (A, D) in pairs.items():
            worst[f"{name}/k={k}"] = _maxdiff(A, D)
    bad = {k: v for k, v in worst.items() if not v < tol}
    m = max(worst.values())
    return CheckResult("dense oracle equivalence", not bad, f"max per-entry diff {m:.2e}" + (f"; failing {bad}" if bad else ""))


def _jacobian_system(k=1):
    mesh = _perturbed_square()
    prm = asm.PhysicalParams(viscosity=asm.Viscosity.exponential(0.5, 4.0), rho_m=1.5, gravity=(0.2, -1.0),
                             Sc=2.0, tau=0.5, v_p=0.7, a0=10.0, nitsche=30.0, drag=0.8)
    bc = asm.BoundaryConditions(velocity={3: "slip"}, u_data=lambda x, y, t: (0.3 * y, -0.2 * x),
                                s_dirichlet=(1,), s_data=lambda x, y, t: 0.5 + 0 * x)
    return asm.CoupledSystem(mesh, k, prm, bc)


def check_jacobian(nstates=20, eps=1e-6, tol=1e-5):
    """Jacobian times a random direction against central differences of the residual."""
    rng = np.random.default_rng(11)
    worst = 0.0
    for k in (1, 2):
        sysm = _jacobian_system(k)
        g, dv = sysm.boundary_data(0.0)
        data = asm.StepData(0.0, wt=3.0, hist=rng.standard_normal(sysm.N), load=None, g_boundary=g, dir_values=dv)
        for _ in range(nstates // 2):
            U = rng.standard_normal(sysm.N)
            d = rng.standard_normal(sysm.N)
            J = sysm.assemble(U, data).matrix
            Rp = -sysm.assemble(U + eps * d, data, jacobian=False).rhs
            Rm = -sysm.assemble(U - eps * d, data, jacobian=False).rhs
            fd = (Rp - Rm) / (2 * eps)
            Jd = J @ d
            worst = max(worst, float(np.linalg.norm(Jd - fd) / np.linalg.norm(Jd)))
    return CheckResult("Jacobian vs central differences", worst < tol, f"max relative mismatch {worst:.2e} over {nstates} states")


def _random_smooth(rng, nterms=3):
    a = rng.uniform(-1, 1, (nterms, 2))
    f = rng.uniform(-2, 2, (nterms, 2, 2))
    ph = rng.uniform(0, np.pi, (nterms, 2))

    def u(x, y):
        return tuple(sum(a[i, j] * np.sin(f[i, j, 0] * x + f[i, j, 1] * y + ph[i, j]) for i in range(nterms))
                     for j in range(2))

    def div(x, y):
        return sum(a[i, j] * f[i, j, j] * np.cos(f[i, j, 0] * x + f[i, j, 1] * y + ph[i, j])
                   for i in range(nterms) for j in range(2))
    return u, div


def check_commuting(tol=1e-11):
    """div of the BDM interpolant equals the L2 projection of div at quadrature points."""
    rng = np.random.default_rng(3)
    worst = 0.0
    pts = quadrature_rule("triangle", 6).ref_points
    for k in (1, 2):
        mesh = _perturbed_square(4)
        V, Q = bdm_space(mesh, k), pressure_space(mesh, k)
        for _ in range(3):
            u, div = _random_smooth(rng)
            lhs = bdm_interpolate(V, u).divergence_cells(pts)
            rhs = l2_project(Q, div).eval_cells(pts, derivs=0)
            worst = max(worst, float(np.abs(lhs - rhs).max()))
    return CheckResult("commuting diagram", worst < tol, f"max |div Pi f - L div f| = {worst:.2e}")


def check_sip_symmetry(tol=1e-12):
    rng = np.random.default_rng(5)
    worst = 0.0
    for k in (1, 2):
        mesh = _perturbed_square(3)
        V, S = bdm_space(mesh, k), lagrange_space(mesh, k)
        prm = asm.PhysicalParams(viscosity=asm.Viscosity.exponential(), a0=10.0, nitsche=100.0)
        A = asm.assemble_a1h(DiscreteField(S, rng.uniform(-1, 1, S.ndofs)), V, prm)
        worst = max(worst, float(abs(A - A.T).max()))
    return CheckResult("SIP symmetry", worst < tol, f"max |A - A^T| = {worst:.2e}")


def _solenoidal_interpolant(V):
    """Pi_h curl(psi) with psi vanishing to second order on the unit square boundary."""
    pi = np.pi

    def u(x, y):
        # psi = sin^2(pi x) sin^2(pi y)
        return (2 * pi * np.sin(pi * x) ** 2 * np.sin(pi * y) * np.cos(pi * y),
                -2 * pi * np.sin(pi * y) ** 2 * np.sin(pi * x) * np.cos(pi * x))
    return bdm_interpolate(V, u)


def check_upwind_positivity(nvec=100):
    rng = np.random.default_rng(9)
    worst = np.inf
    for k in (1, 2):
        V = bdm_space(build_rectangle_mesh(1.0, 1.0, 4, 4), k)
        C = asm.assemble_c1h(_solenoidal_interpolant(V), V)
        for _ in range(nvec):
            v = rng.standard_normal(V.ndofs)
            worst = min(worst, float(v @ (C @ v)) / float(v @ v))
    return CheckResult("upwind positivity", worst >= -1e-11, f"min c1h(w;v,v)/|v|^2 = {worst:.2e}")


def check_c2_skew(nvec=50):
    rng = np.random.default_rng(13)
    worst = 0.0
    for k in (1, 2):
        mesh = build_rectangle_mesh(1.0, 1.0, 4, 4)
        V, S = bdm_space(mesh, k), lagrange_space(mesh, k)
        C = asm.assemble_c2(_solenoidal_interpolant(V), (0.0, 0.0), S)
        for _ in range(nvec):
            phi = rng.standard_normal(S.ndofs)
            worst = max(worst, abs(float(phi @ (C @ phi))) / float(phi @ phi))
    return CheckResult("c2 skew-symmetry", worst < 1e-11, f"max |c2(w;phi,phi)|/|phi|^2 = {worst:.2e}")


def check_coercivity(nvec=200, bound=0.01):
    rng = np.random.default_rng(17)
    worst = np.inf
    for k in (1, 2):
        mesh = _perturbed_square(3)
        V, S = bdm_space(mesh, k), lagrange_space(mesh, k)
        prm = asm.PhysicalParams()
        A = asm.assemble_a1h(DiscreteField(S, np.zeros(S.ndofs)), V, prm)
        for _ in range(nvec):
            v = rng.standard_normal(V.ndofs)
            nrm = broken_h1_norm(DiscreteField(V, v))
            worst = min(worst, float(v @ (A @ v)) / nrm ** 2)
    return CheckResult("a1h coercivity sample", worst >= bound, f"min a1h(v,v)/|v|_1,h^2 = {worst:.3f} (bound {bound})")


def check_quadrature():
    worst = 0.0
    for d in range(MAX_DEGREE + 1):
        tri = quadrature_rule("triangle", d)
        x, y = tri.ref_points[:, 0], tri.ref_points[:, 1]
        edge = quadrature_rule("edge", d)
        t = edge.ref_points
        for a in range(d + 1):
            worst = max(worst, abs(np.sum(edge.weights * t ** a) - 1.0 / (a + 1)))
            for b in range(d + 1 - a):
                exact = factorial(a) * factorial(b) / factorial(a + b + 2)
                worst = max(worst, abs(np.sum(tri.weights * x ** a * y ** b) - exact))
    return CheckResult("quadrature exactness", worst < 1e-14, f"max monomial error {worst:.2e} up to degree {MAX_DEGREE}")


def energy_sequence(k=1, nsteps=8, dt=0.05, nx=4):
    """BDF2 energies |y^n|^2 + |2y^n - y^{n-1}|^2 for s and c with zero data."""
    from .timestepping import BDF2, StepState, advance
    mesh = build_rectangle_mesh(1.0, 1.0, nx, nx)
    prm = asm.PhysicalParams(rho_m=1.0, gravity=(0.0, -10.0), Sc=1.0, tau=2.0, v_p=0.5, alpha=1.0, beta=1.0)
    bc = asm.BoundaryConditions(s_dirichlet=(1, 2, 3, 4), c_dirichlet=(1, 2, 3, 4))
    sysm = asm.CoupledSystem(mesh, k, prm, bc)
    pi = np.pi
    s0 = lagrange_interpolate(sysm.S, lambda x, y: np.sin(pi * x) * np.sin(pi * y)).coeffs
    c0 = lagrange_interpolate(sysm.S, lambda x, y: np.sin(2 * pi * x) * np.sin(pi * y) ** 2).coeffs
    U = sysm.join(np.zeros(sysm.V.ndofs), np.zeros(sysm.Q.ndofs), s0, c0)
    st = StepState(sysm, 0.0, dt, U, scheme=BDF2)
    M = sysm.MS
    energies = {"s": [], "c": []}
    for _ in range(nsteps):
        prev = st.U
        st, _ = advance(st, rtol=1e-12, atol=1e-14)
        _, _, sn, cn, _ = sysm.split(st.U)
        _, _, so, co, _ = sysm.split(prev)
        for name, a, b in (("s", sn, so), ("c", cn, co)):
            e2 = 2 * a - b
            energies[name].append(float(a @ M @ a + e2 @ M @ e2))
    return energies


def check_energy_decay(tol=1e-9):
    en = energy_sequence()
    worst = max(max(np.diff(v)) for v in en.values())
    return CheckResult("energy decay (zero data)", worst <= tol, f"max energy increase {worst:.2e}")


def golden_rows():
    """Deterministic short run: Example 1 on the two coarsest meshes."""
    from .problems import get_problem, run_convergence
    spec = get_problem("example1", levels=2)
    rec = run_convergence(spec)
    buf = io.StringIO()
    w = csv.writer(buf)
    cols = ["level", "dof", "e_u", "e_p", "e_s", "e_c"]
    w.writerow(cols)
    for r in rec.rows:
        w.writerow([r["level"], r["dof"]] + [f"{float(r[c]):.8e}" for c in cols[2:]])
    return buf.getvalue()


def check_golden(rtol=1e-6, path=GOLDEN):
    got = list(csv.DictReader(io.StringIO(golden_rows())))
    if not os.path.exists(path):
        return CheckResult("golden run", False, f"missing golden file {path}")
    with open(path) as fh:
        ref = list(csv.DictReader(fh))
    worst = 0.0
    ok = len(got) == len(ref)
    for a, b in zip(got, ref):
        ok &= a["level"] == b["level"] and a["dof"] == b["dof"]
        for c in ("e_u", "e_p", "e_s", "e_c"):
            worst = max(worst, abs(float(a[c]) - float(b[c])) / abs(float(b[c])))
    return CheckResult("golden run", ok and worst < rtol, f"max relative deviation {worst:.2e}")


CHECKS = (check_quadrature, check_dense_oracles, check_jacobian, check_commuting, check_sip_symmetry,
          check_upwind_positivity, check_c2_skew, check_coercivity, check_energy_decay, check_golden)


def run_selftest(out=print):
    """Run every check, print one line each; returns the list of results."""
    results = []
    for chk in CHECKS:
        t0 = time.perf_counter()
        try:
            r = chk()
        except Exception as exc:  # report, keep going
            r = CheckResult(chk.__name__, False, f"{type(exc).__name__}: {exc}")
        results.append(r)
        out(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail} ({time.perf_counter() - t0:.1f}s)")
    npass = sum(r.passed for r in results)
    out(f"{npass}/{len(results)} checks passed")
    return results

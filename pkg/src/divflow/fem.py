"""Finite element spaces on triangles.

Three families are provided:

* ``BDM``  Brezzi-Douglas-Marini H(div) elements of degree k (vector valued),
  mapped with the contravariant Piola transform,
* ``DG``   discontinuous P_m scalars (pressure, with m = k - 1),
* ``P``    continuous Lagrange P_k scalars.

Analytic functions are passed as callables ``f(x, y)`` acting elementwise on
arrays; vector functions return a pair of arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .quadrature import quadrature_rule

REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
LOCAL_EDGES = ((1, 2), (2, 0), (0, 1))
ANALYTIC_DEGREE = 12       # quadrature exactness used for moments of analytic data


# -- monomials ----------------------------------------------------------------
def _exponents(k):
    return [(d - b, b) for d in range(k + 1) for b in range(d + 1)]


def _powers(x, n):
    out = [np.ones_like(x)]
    for _ in range(n):
        out.append(out[-1] * x)
    return out


def monomial_tables(exps, xy):
    """Values, gradients and Hessians of monomials ``x^a y^b`` at points ``xy`` (n, 2)."""
    xy = np.atleast_2d(xy)
    k = max(a + b for a, b in exps)
    X = _powers(xy[:, 0], k)
    Y = _powers(xy[:, 1], k)
    n, m = len(xy), len(exps)
    V = np.empty((n, m))
    G = np.zeros((n, m, 2))
    H = np.zeros((n, m, 2, 2))
    for j, (a, b) in enumerate(exps):
        V[:, j] = X[a] * Y[b]
        if a >= 1:
            G[:, j, 0] = a * X[a - 1] * Y[b]
        if b >= 1:
            G[:, j, 1] = b * X[a] * Y[b - 1]
        if a >= 2:
            H[:, j, 0, 0] = a * (a - 1) * X[a - 2] * Y[b]
        if b >= 2:
            H[:, j, 1, 1] = b * (b - 1) * X[a] * Y[b - 2]
        if a >= 1 and b >= 1:
            H[:, j, 0, 1] = H[:, j, 1, 0] = a * b * X[a - 1] * Y[b - 1]
    return V, G, H


def legendre01(j, t):
    """Legendre polynomial of degree j shifted to [0, 1]."""
    if j == 0:
        return np.ones_like(t)
    if j == 1:
        return 2 * t - 1
    if j == 2:
        return 6 * t * t - 6 * t + 1
    raise ValueError("edge Legendre degree > 2 not needed")


# -- reference elements -----------------------------------------------------
@dataclass(frozen=True)
class ReferenceElement:
    kind: str
    degree: int
    exps: tuple
    coeffs: np.ndarray          # (nb, m) scalar or (nb, 2, m) vector

    @property
    def nb(self):
        return self.coeffs.shape[0]

    @property
    def vector(self):
        return self.coeffs.ndim == 3

    def tabulate(self, xy):
        """Reference values, gradients, Hessians at points (n, 2)."""
        V, G, H = monomial_tables(self.exps, xy)
        if self.vector:
            val = np.einsum("icm,nm->nic", self.coeffs, V)
            grad = np.einsum("icm,nmd->nicd", self.coeffs, G)
            hess = np.einsum("icm,nmde->nicde", self.coeffs, H)
        else:
            val = np.einsum("im,nm->ni", self.coeffs, V)
            grad = np.einsum("im,nmd->nid", self.coeffs, G)
            hess = np.einsum("im,nmde->nide", self.coeffs, H)
        return val, grad, hess


def _edge_param(i, t):
    a, b = LOCAL_EDGES[i]
    pa, pb = REF_VERTICES[a], REF_VERTICES[b]
    pts = pa[None, :] + t[:, None] * (pb - pa)[None, :]
    d = pb - pa
    length = np.hypot(*d)
    normal = np.array([d[1], -d[0]]) / length      # outward for counter-clockwise order
    return pts, normal, length


def nedelec1_interior(xy):
    """Interior test functions for BDM_2: (1, 0), (0, 1), (-y, x)."""
    n = len(xy)
    q = np.zeros((n, 3, 2))
    q[:, 0, 0] = 1.0
    q[:, 1, 1] = 1.0
    q[:, 2, 0] = -xy[:, 1]
    q[:, 2, 1] = xy[:, 0]
    return q


@lru_cache(maxsize=None)
def reference_element(kind, degree):
    if kind == "BDM":
        k = degree
        if k not in (1, 2):
            raise ValueError("BDM degree must be 1 or 2")
        exps = tuple(_exponents(k))
        m = len(exps)
        eq = quadrature_rule("edge", 2 * k + 2)
        te = eq.ref_points
        rows = []
        # prime basis: component c times monomial j, flattened as c * m + j
        for i in range(3):
            pts, normal, length = _edge_param(i, te)
            V, _, _ = monomial_tables(exps, pts)
            for j in range(k + 1):
                w = eq.weights * legendre01(j, te) * length
                row = np.concatenate([normal[0] * (w @ V), normal[1] * (w @ V)])
                rows.append(row)
        if k >= 2:
            tq = quadrature_rule("triangle", 2 * k + 2)
            xy = tq.ref_points
            V, _, _ = monomial_tables(exps, xy)
            q = nedelec1_interior(xy)
            for i in range(q.shape[1]):
                rows.append(np.concatenate([(tq.weights * q[:, i, 0]) @ V,
                                            (tq.weights * q[:, i, 1]) @ V]))
        D = np.array(rows)
        C = np.linalg.inv(D).T.reshape(-1, 2, m)
        C[np.abs(C) < 1e-13] = 0.0
        return ReferenceElement(kind, k, exps, C)
    if kind in ("P", "DG"):
        k = degree
        if kind == "P" and k not in (1, 2):
            raise ValueError("Lagrange degree must be 1 or 2")
        if kind == "DG" and k not in (0, 1):
            raise ValueError("DG degree must be 0 or 1")
        exps = tuple(_exponents(k))
        nodes = lagrange_reference_nodes(k)
        V, _, _ = monomial_tables(exps, nodes)
        C = np.linalg.inv(V).T
        C[np.abs(C) < 1e-13] = 0.0
        return ReferenceElement(kind, k, exps, C)
    raise ValueError(f"unknown element kind {kind!r}")


def lagrange_reference_nodes(k):
    if k == 0:
        return np.array([[1 / 3, 1 / 3]])
    if k == 1:
        return REF_VERTICES.copy()
    mids = np.array([(REF_VERTICES[a] + REF_VERTICES[b]) / 2 for a, b in LOCAL_EDGES])
    return np.vstack([REF_VERTICES, mids])


# -- spaces -------------------------------------------------------------------
_KIND_ALIASES = {"DG_PRESSURE": "DG", "LAGRANGE": "P"}

class FunctionSpace:
    """Degree-of-freedom layout of one finite element family on a mesh.

    ``degree`` is the local polynomial degree (``k`` for BDM and Lagrange,
    ``k - 1`` for the pressure space).
    """

    def __init__(self, mesh, kind, degree):
        kind = _KIND_ALIASES.get(kind, kind)
        self.mesh = mesh
        self.kind = kind
        self.degree = degree
        self.ref = reference_element(kind, degree)
        nt = mesh.nt
        if kind == "BDM":
            k = degree
            ne_dofs = k + 1
            self.n_interior = 3 if k == 2 else 0
            t, te = mesh.triangles, mesh.tri_edges
            dofs, signs = [], []
            tri_ids = np.arange(nt)
            for i, (a, b) in enumerate(LOCAL_EDGES):
                e = te[:, i]
                s_n = np.where(mesh.edge_tris[e, 0] == tri_ids, 1.0, -1.0)
                s_dir = np.where(t[:, a] < t[:, b], 1.0, -1.0)
                for j in range(ne_dofs):
                    dofs.append(e * ne_dofs + j)
                    signs.append(s_n * s_dir ** j)
            base = mesh.ne * ne_dofs
            for i in range(self.n_interior):
                dofs.append(base + tri_ids * self.n_interior + i)
                signs.append(np.ones(nt))
            self.cell_dofs = np.column_stack(dofs)
            self.cell_signs = np.column_stack(signs)
            self.ndofs = base + nt * self.n_interior
        elif kind == "P":
            if degree == 1:
                self.cell_dofs = mesh.triangles.copy()
                self.ndofs = mesh.nv
            else:
                self.cell_dofs = np.column_stack([mesh.triangles, mesh.nv + mesh.tri_edges])
                self.ndofs = mesh.nv + mesh.ne
            self.cell_signs = np.ones(self.cell_dofs.shape)
        elif kind == "DG":
            nb = self.ref.nb
            self.cell_dofs = np.arange(nt * nb).reshape(nt, nb)
            self.cell_signs = np.ones((nt, nb))
            self.ndofs = nt * nb
        else:
            raise ValueError(kind)
        self.cell_dofs.setflags(write=False)
        self.cell_signs.setflags(write=False)

    @property
    def nb(self):
        return self.ref.nb

    @property
    def vector(self):
        return self.ref.vector

    def __repr__(self):
        return f"FunctionSpace({self.kind}{self.degree}, ndofs={self.ndofs})"

    # -- tabulation -----------------------------------------------------------
    def tabulate(self, xhat, tris=None, derivs=1, pointwise=False):
        """Physical basis values (and derivatives) at reference points.

        With ``pointwise=False`` the points (nq, 2) are shared by all cells in
        ``tris`` and arrays have leading shape (ncell, nq, nb). With
        ``pointwise=True`` point n belongs to cell ``tris[n]`` and arrays have
        leading shape (n, nb). Signs of the global orientation are included.
        """
        mesh = self.mesh
        if tris is None:
            tris = np.arange(mesh.nt)
        tris = np.asarray(tris)
        val, grad, hess = self.ref.tabulate(np.atleast_2d(xhat))
        J = mesh.jacobians[tris]
        Ji = mesh.inv_jacobians[tris]
        det = mesh.dets[tris]
        sg = self.cell_signs[tris]
        if not pointwise:
            J, Ji = J[:, None], Ji[:, None]
            det = det[:, None]
            sg = sg[:, None, :]
            val, grad, hess = val[None], grad[None], hess[None]
        out = []
        if self.vector:
            v = np.einsum("...ab,...ib->...ia", J, val) / det[..., None, None]
            out.append(v * sg[..., None])
            if derivs >= 1:
                g = np.einsum("...ac,...icd,...db->...iab", J, grad, Ji) / det[..., None, None, None]
                out.append(g * sg[..., None, None])
            if derivs >= 2:
                h = np.einsum("...ad,...idef,...eb,...fc->...iabc", J, hess, Ji, Ji)
                out.append(h / det[..., None, None, None, None] * sg[..., None, None, None])
        else:
            out.append(val * np.ones_like(sg) * sg)
            if derivs >= 1:
                out.append(np.einsum("...ib,...bc->...ic", grad, Ji) * sg[..., None])
            if derivs >= 2:
                h = np.einsum("...ide,...db,...ec->...ibc", hess, Ji, Ji)
                out.append(h * sg[..., None, None])
        return out if derivs > 0 else out[0]

    # -- geometry of nodes / boundary -----------------------------------------
    def node_coordinates(self):
        """Physical coordinates of Lagrange nodes."""
        if self.kind != "P":
            raise ValueError("nodes only defined for Lagrange spaces")
        m = self.mesh
        if self.degree == 1:
            return m.vertices.copy()
        return np.vstack([m.vertices, m.vertices[m.edges].mean(axis=1)])

    def boundary_dofs(self, tags=None):
        """Dofs attached to boundary edges whose tag is in ``tags`` (all if None)."""
        m = self.mesh
        b = m.boundary_edges
        if tags is not None:
            b = b[np.isin(m.edge_tags[b], list(tags))]
        if self.kind == "BDM":
            k1 = self.degree + 1
            return np.unique((b[:, None] * k1 + np.arange(k1)[None, :]).ravel())
        if self.kind == "P":
            d = [m.edges[b].ravel()]
            if self.degree == 2:
                d.append(m.nv + b)
            return np.unique(np.concatenate(d)).astype(np.int64)
        return np.zeros(0, dtype=np.int64)


SpaceDescriptor = FunctionSpace


def bdm_space(mesh, k):
    return FunctionSpace(mesh, "BDM", k)


def pressure_space(mesh, k):
    return FunctionSpace(mesh, "DG", k - 1)


def lagrange_space(mesh, k):
    return FunctionSpace(mesh, "P", k)


def eval_basis(space, triangle, points):
    """Values and gradients of all local basis functions of one triangle.

    ``points`` are reference coordinates (n, 2). Returns arrays of shape
    (n, nb[, 2]) and (n, nb, 2[, 2]).
    """
    val, grad = space.tabulate(np.atleast_2d(points), tris=np.array([triangle]), derivs=1)
    return val[0], grad[0]


# -- discrete fields ----------------------------------------------------------
class DiscreteField:
    """Coefficient vector bound to a function space."""

    def __init__(self, space, coeffs=None):
        self.space = space
        if coeffs is None:
            coeffs = np.zeros(space.ndofs)
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (space.ndofs,):
            raise ValueError(f"expected {space.ndofs} coefficients, got {coeffs.shape}")
        self.coeffs = coeffs

    def copy(self):
        return DiscreteField(self.space, self.coeffs.copy())

    def __add__(self, other):
        return DiscreteField(self.space, self.coeffs + other.coeffs)

    def __sub__(self, other):
        return DiscreteField(self.space, self.coeffs - other.coeffs)

    def __mul__(self, a):
        return DiscreteField(self.space, a * self.coeffs)

    __rmul__ = __mul__

    def local(self, tris=None):
        sp = self.space
        d = sp.cell_dofs if tris is None else sp.cell_dofs[tris]
        return self.coeffs[d]

    def eval_cells(self, xhat, tris=None, derivs=1, pointwise=False):
        """Field value (and derivatives) at reference points of cells.

        Coefficients are combined on the reference cell first, then mapped.
        """
        sp, mesh = self.space, self.space.mesh
        tris = np.arange(mesh.nt) if tris is None else np.asarray(tris)
        ref = sp.ref.tabulate(np.atleast_2d(xhat))[:derivs + 1]
        w = self.local(tris) * sp.cell_signs[tris]
        J, Ji, det = mesh.jacobians[tris], mesh.inv_jacobians[tris], mesh.dets[tris]
        if pointwise:
            comb = [np.einsum("nb...,nb->n...", t, w) for t in ref]
        else:
            comb = [np.einsum("qb...,tb->tq...", t, w) for t in ref]
            J, Ji, det = J[:, None], Ji[:, None], det[:, None]
        if sp.vector:
            out = [np.einsum("...ab,...b->...a", J, comb[0]) / det[..., None]]
            if derivs >= 1:
                out.append(np.einsum("...ac,...cd,...db->...ab", J, comb[1], Ji) / det[..., None, None])
            if derivs >= 2:
                h = np.einsum("...ad,...def,...eb,...fc->...abc", J, comb[2], Ji, Ji, optimize=True)
                out.append(h / det[..., None, None, None])
        else:
            out = [comb[0]]
            if derivs >= 1:
                out.append(np.einsum("...b,...bc->...c", comb[1], Ji))
            if derivs >= 2:
                out.append(np.einsum("...de,...db,...ec->...bc", comb[2], Ji, Ji, optimize=True))
        return out if derivs > 0 else out[0]

    def __call__(self, points):
        """Evaluate at physical points (n, 2) using point location."""
        pts = np.atleast_2d(points)
        tri, lam = self.space.mesh.locate(pts)
        return self.eval_cells(lam[:, 1:], tris=tri, derivs=0, pointwise=True)

    def divergence_cells(self, xhat):
        _, g = self.eval_cells(xhat, derivs=1)
        return g[..., 0, 0] + g[..., 1, 1]


# -- interpolation ------------------------------------------------------------
def _as_pointwise(f, vector):
    def g(P):
        r = f(P[:, 0], P[:, 1])
        if vector:
            return np.column_stack([np.broadcast_to(np.asarray(c, dtype=float), (len(P),)) for c in r])
        return np.broadcast_to(np.asarray(r, dtype=float), (len(P),)).copy()
    return g


def edge_quadrature_points(mesh, degree, edges=None):
    """Physical points on edges parametrised from the lower to the higher vertex."""
    rule = quadrature_rule("edge", degree)
    t = rule.ref_points
    if edges is None:
        edges = np.arange(mesh.ne)
    v = mesh.vertices[mesh.edges[edges]]
    pts = v[:, None, 0, :] + t[None, :, None] * (v[:, None, 1, :] - v[:, None, 0, :])
    wts = rule.weights[None, :] * mesh.edge_lengths[edges][:, None]
    return pts, wts, t


def _bdm_edge_moments(space, g, edges, degree=None):
    """Normal moments of pointwise function g against edge Legendre polynomials."""
    mesh = space.mesh
    k = space.degree
    pts, wts, t = edge_quadrature_points(mesh, degree or 2 * k + 2, edges)
    ne, nq = pts.shape[:2]
    vals = g(pts.reshape(-1, 2)).reshape(ne, nq, 2)
    fn = np.einsum("eqc,ec->eq", vals, mesh.edge_normals[edges])
    return np.stack([np.sum(wts * fn * legendre01(j, t)[None, :], axis=1) for j in range(k + 1)], axis=1)


def _bdm_interpolate_pointwise(space, g, degree=None):
    mesh = space.mesh
    k = space.degree
    c = np.zeros(space.ndofs)
    c[: mesh.ne * (k + 1)] = _bdm_edge_moments(space, g, np.arange(mesh.ne), degree).ravel()
    if space.n_interior:
        rule = quadrature_rule("triangle", degree or 2 * k + 2)
        xy = rule.ref_points
        P = mesh.vertices[mesh.triangles[:, 0]][:, None, :] + np.einsum("tab,qb->tqa", mesh.jacobians, xy)
        vals = g(P.reshape(-1, 2)).reshape(mesh.nt, len(xy), 2)
        pull = np.einsum("tab,tqb->tqa", mesh.inv_jacobians, vals) * mesh.dets[:, None, None]
        q = nedelec1_interior(xy)
        mom = np.einsum("q,tqa,qia->ti", rule.weights, pull, q)
        c[mesh.ne * (k + 1):] = mom.ravel()
    return DiscreteField(space, c)


def bdm_interpolate(space, f, degree=ANALYTIC_DEGREE):
    """Canonical BDM interpolant of an analytic vector function.

    The moments are integrated with a rule of exactness ``degree``.
    """
    return _bdm_interpolate_pointwise(space, _as_pointwise(f, True), degree)


def bdm_boundary_values(space, f, tags=None):
    """(dofs, values) of the normal moments of ``f`` on tagged boundary edges."""
    mesh = space.mesh
    b = mesh.boundary_edges
    if tags is not None:
        b = b[np.isin(mesh.edge_tags[b], list(tags))]
    k1 = space.degree + 1
    dofs = (b[:, None] * k1 + np.arange(k1)[None, :]).ravel()
    if f is None:
        return dofs, np.zeros(len(dofs))
    vals = _bdm_edge_moments(space, _as_pointwise(f, True), b, ANALYTIC_DEGREE).ravel()
    return dofs, vals


def lagrange_interpolate(space, f):
    """Nodal interpolant of an analytic scalar function."""
    X = space.node_coordinates()
    return DiscreteField(space, _as_pointwise(f, False)(X))


def _cell_points(mesh, xy, tris=None):
    if tris is None:
        tris = np.arange(mesh.nt)
    return mesh.vertices[mesh.triangles[tris, 0]][:, None, :] + np.einsum("tab,qb->tqa", mesh.jacobians[tris], xy)


def _l2_project_pointwise(space, g, degree):
    mesh = space.mesh
    rule = quadrature_rule("triangle", min(degree, 12))
    xy = rule.ref_points
    phi = space.tabulate(xy, derivs=0)                     # (nt, nq, nb)
    w = rule.weights[None, :] * mesh.dets[:, None]
    M = np.einsum("tq,tqi,tqj->tij", w, phi, phi)
    P = _cell_points(mesh, xy)
    vals = g(P.reshape(-1, 2)).reshape(mesh.nt, len(xy))
    rhs = np.einsum("tq,tq,tqi->ti", w, vals, phi)
    if np.any(np.abs(np.linalg.det(M)) < 1e-300):
        raise np.linalg.LinAlgError("singular local mass matrix (degenerate triangle)")
    loc = np.linalg.solve(M, rhs[..., None])[..., 0]
    c = np.zeros(space.ndofs)
    c[space.cell_dofs] = loc
    return DiscreteField(space, c)


def l2_project(space, f, degree=None):
    """Elementwise L2 projection onto the discontinuous space."""
    if space.kind != "DG":
        raise ValueError("l2_project expects a discontinuous space")
    return _l2_project_pointwise(space, _as_pointwise(f, False), degree or ANALYTIC_DEGREE)


def transfer_field(field, target):
    """Canonical interpolation of ``field`` onto ``target`` (possibly another mesh)."""
    src = field.space
    if src.kind != target.kind:
        raise ValueError("source and target spaces must be of the same family")
    g = lambda P: field(P)
    if target.kind == "BDM":
        return _bdm_interpolate_pointwise(target, g)
    if target.kind == "P":
        return DiscreteField(target, g(target.node_coordinates()))
    return _l2_project_pointwise(target, g, 2 * max(src.degree, target.degree) + 2)

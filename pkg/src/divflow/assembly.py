"""Element and edge kernels, global assembly, and the coupled Newton system.

Unknowns are ordered ``U = [u, p, s, c, lam]`` where ``lam`` is the scalar
multiplier fixing the pressure mean. All kernels are vectorised over cells
(or edges); local blocks are scattered into COO triplets and compressed once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .fem import FunctionSpace, bdm_space, pressure_space, lagrange_space, bdm_boundary_values
from .linalg import compress
from .quadrature import quadrature_rule


# -- parameters -----------------------------------------------------------------
@dataclass
class Viscosity:
    """Viscosity law nu(c, X) with derivative in c; X are physical points."""

    nu: Callable
    dnu: Callable
    name: str = "custom"
    constant: bool = False
    sym: Optional[Callable] = None      # sym(c, exp) for symbolic differentiation

    def __call__(self, c, X=None):
        return self.nu(c, X)

    @classmethod
    def const(cls, nu0=1.0):
        return cls(lambda c, X=None: np.full(np.shape(c), float(nu0)),
                   lambda c, X=None: np.zeros(np.shape(c)), f"constant({nu0})", True,
                   lambda c, exp=np.exp: float(nu0) + 0 * c)

    @classmethod
    def exponential(cls, nu0=0.1, scale=4.0):
        """nu0 * (1 + exp(-c / scale))."""
        return cls(lambda c, X=None: nu0 * (1.0 + np.exp(-np.asarray(c) / scale)),
                   lambda c, X=None: -nu0 / scale * np.exp(-np.asarray(c) / scale),
                   f"exponential({nu0},{scale})",
                   sym=lambda c, exp=np.exp: nu0 * (1 + exp(-c / scale)))

    @classmethod
    def spatial(cls, func):
        """Concentration independent viscosity varying in space, func(x, y)."""
        def nu(c, X=None):
            return np.broadcast_to(func(X[..., 0], X[..., 1]), np.shape(c)).astype(float)
        return cls(nu, lambda c, X=None: np.zeros(np.shape(c)), "spatial")


@dataclass
class PhysicalParams:
    viscosity: Viscosity = field(default_factory=Viscosity.const)
    rho_m: float = 1.0
    gravity: tuple = (0.0, -1.0)
    Sc: float = 1.0
    tau: float = 1.0
    v_p: float = 0.0
    alpha: float = 0.5
    beta: float = 0.5
    a0: float = 10.0
    nitsche: Optional[float] = None
    drag: float = 0.0

    def __post_init__(self):
        if not self.Sc > 0 or not self.tau > 0:
            raise ValueError("Sc and tau must be positive")
        if not self.a0 > 0:
            raise ValueError("a0 must be positive")
        if self.drag < 0:
            raise ValueError("drag must be nonnegative")
        if not self.rho_m > 0:
            raise ValueError("rho_m must be positive")
        self.gravity = tuple(float(g) for g in self.gravity)

    @property
    def boundary_penalty(self):
        return max(self.a0, self.nitsche if self.nitsche is not None else self.a0)

    @property
    def settling_shift(self):
        """Constant added to u in the c-transport: -v_p e_z."""
        return np.array([0.0, -self.v_p])


# -- cached quadrature tables -------------------------------------------------------
class EdgeQuad:
    """Quadrature on a set of edges, with tabulations from either neighbour."""

    def __init__(self, mesh, edges, degree):
        self.mesh = mesh
        self.edges = np.asarray(edges, dtype=np.int64)
        rule = quadrature_rule("edge", degree)
        t = rule.ref_points
        v = mesh.vertices[mesh.edges[self.edges]]
        self.t = t
        self.X = v[:, None, 0, :] + t[None, :, None] * (v[:, None, 1, :] - v[:, None, 0, :])
        self.h = mesh.edge_lengths[self.edges]
        self.ds = rule.weights[None, :] * self.h[:, None]
        self.n = mesh.edge_normals[self.edges]
        self.tris = mesh.edge_tris[self.edges]
        self._cache = {}

    @property
    def ne(self):
        return len(self.edges)

    def ref_coords(self, side):
        key = ("ref", side)
        if key not in self._cache:
            nq = len(self.t)
            tri = np.repeat(self.tris[:, side], nq)
            lam = self.mesh.barycentric(tri, self.X.reshape(-1, 2))
            self._cache[key] = (tri, lam[:, 1:])
        return self._cache[key]

    def tab(self, space, side=0, derivs=1):
        key = (space.kind, space.degree, side, derivs)
        if key not in self._cache:
            ne, nq = self.X.shape[:2]
            if ne == 0:
                shape = (0, nq, space.nb) + ((2,) if space.vector else ())
                out = [np.zeros(shape)] + [np.zeros(shape + (2,) * d) for d in range(1, derivs + 1)]
            else:
                tri, xh = self.ref_coords(side)
                out = space.tabulate(xh, tris=tri, derivs=derivs, pointwise=True)
                if derivs == 0:
                    out = [out]
                out = [a.reshape((ne, nq) + a.shape[1:]) for a in out]
            self._cache[key] = out
        return self._cache[key]

    def dofs(self, space, side=0):
        return space.cell_dofs[self.tris[:, side]]

    def field(self, space, coeffs, side=0, derivs=1):
        """Field values (and derivatives) at edge points from one side."""
        tabs = self.tab(space, side, derivs)
        loc = coeffs[self.dofs(space, side)]
        out = []
        for a in tabs:
            extra = a.ndim - 3
            out.append((a * loc[:, None, :].reshape(loc.shape[0], 1, loc.shape[1], *(1,) * extra)).sum(axis=2))
        return out


class MeshTables:
    """Volume and edge quadrature data shared by all forms on one mesh."""

    def __init__(self, mesh, tri_degree, edge_degree):
        self.mesh = mesh
        self.edge_degree = edge_degree
        rule = quadrature_rule("triangle", tri_degree)
        self.xy = rule.ref_points
        self.dx = rule.weights[None, :] * mesh.dets[:, None]
        self.X = mesh.vertices[mesh.triangles[:, 0]][:, None, :] + np.einsum("tab,qb->tqa", mesh.jacobians, self.xy)
        self.interior = EdgeQuad(mesh, mesh.interior_edges, edge_degree)
        self.boundary = EdgeQuad(mesh, mesh.boundary_edges, edge_degree)
        self._cache = {}

    def vol(self, space, derivs=1):
        key = (space.kind, space.degree, derivs)
        if key not in self._cache:
            out = space.tabulate(self.xy, derivs=derivs)
            self._cache[key] = out if derivs > 0 else [out]
        return self._cache[key]

    def field(self, space, coeffs, derivs=1):
        tabs = self.vol(space, derivs)
        loc = coeffs[space.cell_dofs]
        out = []
        for a in tabs:
            extra = a.ndim - 3
            out.append((a * loc.reshape(loc.shape[0], 1, loc.shape[1], *(1,) * extra)).sum(axis=2))
        return out


def get_tables(mesh, k, tri_degree=None, edge_degree=None):
    tri_degree = tri_degree or 2 * k + 2
    edge_degree = edge_degree or 2 * k + 1
    # stored on the mesh itself: tables refer back to it, so a weak-key map would never drop them
    per_mesh = mesh.__dict__.setdefault("_tables", {})
    key = (tri_degree, edge_degree)
    if key not in per_mesh:
        per_mesh[key] = MeshTables(mesh, tri_degree, edge_degree)
    return per_mesh[key]


def _tables_for(space):
    k = space.degree + 1 if space.kind == "DG" else space.degree
    return get_tables(space.mesh, k)


# -- scatter helpers -------------------------------------------------------------------
def _triplets(rows, cols, loc):
    R = np.broadcast_to(rows[:, :, None], loc.shape)
    C = np.broadcast_to(cols[:, None, :], loc.shape)
    return R.ravel(), C.ravel(), loc.ravel()


def _matrix(parts, shape):
    if not parts:
        return sp.csr_matrix(shape)
    r = np.concatenate([p[0] for p in parts])
    c = np.concatenate([p[1] for p in parts])
    v = np.concatenate([p[2] for p in parts])
    return compress(r, c, v, shape)


def _vector(dofs, loc, n):
    return np.bincount(dofs.ravel(), weights=loc.ravel(), minlength=n)


def _sign0(x):
    return np.sign(x)


# -- kernels ---------------------------------------------------------------------------
def _a1h_edge_blocks(T, eq, uspace, sspace, params, c, u=None, g=None, boundary=False, derivs=True):
    """Local SIP matrices (and residual / c-derivative pieces) on a set of edges."""
    if eq.ne == 0:
        return None
    uvm, ugm = eq.tab(uspace, 0, 1)
    cm = eq.field(sspace, c, 0, derivs=0)[0]
    nu = params.viscosity(cm, eq.X)
    n = eq.n
    if boundary:
        Jb = uvm
        Mb = np.einsum("eqiab,eb->eqia", ugm, n)
        dofs = eq.dofs(uspace, 0)
        pen = params.boundary_penalty
    else:
        uvp, ugp = eq.tab(uspace, 1, 1)
        Jb = np.concatenate([uvm, -uvp], axis=2)
        Mb = 0.5 * np.einsum("eqiab,eb->eqia", np.concatenate([ugm, ugp], axis=2), n)
        dofs = np.concatenate([eq.dofs(uspace, 0), eq.dofs(uspace, 1)], axis=1)
        pen = params.a0
    w = eq.ds * nu
    ph = (pen / eq.h)[:, None]
    JJ = np.einsum("eqia,eqja->eqij", Jb, Jb)
    JM = np.einsum("eqia,eqja->eqij", Jb, Mb)
    E = np.einsum("eq,eqij->eij", w, -JM - JM.transpose(0, 1, 3, 2) + ph[..., None, None] * JJ)
    E = 0.5 * (E + E.transpose(0, 2, 1))
    out = {"dofs": dofs, "E": E}
    if u is not None:
        Ju = np.einsum("eqia,ei->eqa", Jb, u[dofs])
        if g is not None:
            Ju = Ju - g
        Mu = np.einsum("eqia,ei->eqa", Mb, u[dofs])
        bracket = (-np.einsum("eqia,eqa->eqi", Jb, Mu) - np.einsum("eqia,eqa->eqi", Mb, Ju)
                   + ph[..., None] * np.einsum("eqia,eqa->eqi", Jb, Ju))
        out["res"] = np.einsum("eq,eqi->ei", w, bracket)
        if derivs and not params.viscosity.constant:
            dnu = params.viscosity.dnu(cm, eq.X)
            psi = eq.tab(sspace, 0, 0)[0]
            out["dc"] = np.einsum("eq,eqi,eqm->eim", eq.ds * dnu, bracket, psi, optimize=True)
            out["cdofs"] = eq.dofs(sspace, 0)
    return out


def a1h_parts(T, uspace, sspace, params, c, u=None, g_boundary=None, dirichlet_edges=None, derivs=True):
    """Pieces of a1h: matrix triplets, residual vector (if u given) and d/dc triplets.

    ``g_boundary`` holds the Dirichlet velocity at the quadrature points of the
    boundary edges selected by ``dirichlet_edges``.
    """
    nu_dofs = uspace.ndofs
    mesh = T.mesh
    cq = T.field(sspace, c, derivs=0)[0]
    nu = params.viscosity(cq, T.X)
    G = T.vol(uspace, 1)[1]
    A = np.einsum("tq,tqiab,tqjab->tij", T.dx * nu, G, G, optimize=True)
    A = 0.5 * (A + A.transpose(0, 2, 1))
    dofs = uspace.cell_dofs
    mat = [_triplets(dofs, dofs, A)]
    res = np.zeros(nu_dofs) if u is not None else None
    dc = []
    if u is not None:
        res += _vector(dofs, np.einsum("tij,tj->ti", A, u[dofs]), nu_dofs)
        if derivs and not params.viscosity.constant:
            Gu = np.einsum("tqiab,ti->tqab", G, u[dofs])
            dnu = params.viscosity.dnu(cq, T.X)
            psi = T.vol(sspace, 0)[0]
            D = np.einsum("tq,tqiab,tqab,tqm->tim", T.dx * dnu, G, Gu, psi, optimize=True)
            dc.append(_triplets(dofs, sspace.cell_dofs, D))
    blocks = [_a1h_edge_blocks(T, T.interior, uspace, sspace, params, c, u, None, False, derivs)]
    bq = T.boundary
    if dirichlet_edges is not None and bq.ne:
        sel = dirichlet_edges
        if np.any(sel):
            sub = _subset_edges(T, sel)
            blocks.append(_a1h_edge_blocks(T, sub, uspace, sspace, params, c, u, g_boundary, True, derivs))
    for b in blocks:
        if b is None:
            continue
        mat.append(_triplets(b["dofs"], b["dofs"], b["E"]))
        if u is not None:
            res += _vector(b["dofs"], b["res"], nu_dofs)
            if "dc" in b:
                dc.append(_triplets(b["dofs"], b["cdofs"], b["dc"]))
    return mat, res, dc


def _subset_edges(T, mask):
    key = ("bsub", mask.tobytes())
    if key not in T._cache:
        T._cache[key] = EdgeQuad(T.mesh, T.boundary.edges[mask], T.edge_degree)
    return T._cache[key]


def c1h_parts(T, uspace, w, u, derivs=True):
    """Pieces of c1h(w; u, .): trial triplets, residual and w-slot triplets."""
    n_u = uspace.ndofs
    dofs = uspace.cell_dofs
    val, grad = T.vol(uspace, 1)
    W = T.field(uspace, w, derivs=0)[0]
    Cl = np.einsum("tq,tqia,tqjab,tqb->tij", T.dx, val, grad, W, optimize=True)
    mat = [_triplets(dofs, dofs, Cl)]
    res = _vector(dofs, np.einsum("tij,tj->ti", Cl, u[dofs]), n_u)
    wslot = []
    if derivs:
        Gu = np.einsum("tqiab,ti->tqab", grad, u[dofs])
        Cw = np.einsum("tq,tqia,tqab,tqjb->tij", T.dx, val, Gu, val, optimize=True)
        wslot.append(_triplets(dofs, dofs, Cw))
    eq = T.interior
    if eq.ne:
        uvm = eq.tab(uspace, 0, 1)[0]
        uvp = eq.tab(uspace, 1, 1)[0]
        wm = eq.field(uspace, w, 0, derivs=0)[0]
        wn = np.einsum("eqa,ea->eq", wm, eq.n)
        edofs = np.concatenate([eq.dofs(uspace, 0), eq.dofs(uspace, 1)], axis=1)
        Jb = np.concatenate([uvm, -uvp], axis=2)
        Tb = np.concatenate([np.minimum(wn, 0)[..., None, None] * uvm,
                             np.maximum(wn, 0)[..., None, None] * uvp], axis=2)
        E = -np.einsum("eq,eqia,eqja->eij", eq.ds, Tb, Jb, optimize=True)
        mat.append(_triplets(edofs, edofs, E))
        res += _vector(edofs, np.einsum("eij,ej->ei", E, u[edofs]), n_u)
        if derivs:
            sg = _sign0(wn)
            Ju = np.einsum("eqia,ei->eqa", Jb, u[edofs])
            Db = np.concatenate([(0.5 * (1 - sg))[..., None, None] * uvm,
                                 (0.5 * (1 + sg))[..., None, None] * uvp], axis=2)
            phin = np.einsum("eqja,ea->eqj", uvm, eq.n)
            Ew = -np.einsum("eq,eqia,eqa,eqj->eij", eq.ds, Db, Ju, phin, optimize=True)
            wslot.append(_triplets(edofs, eq.dofs(uspace, 0), Ew))
    return mat, res, wslot


def c2_parts(T, sspace, uspace, advect, shift, phi, derivs=True):
    """c2(advect + shift; phi, .): trial triplets, residual and advect-derivative triplets."""
    dofs = sspace.cell_dofs
    val, grad = T.vol(sspace, 1)
    W = T.field(uspace, advect, derivs=0)[0] + np.asarray(shift)[None, None, :]
    Cl = np.einsum("tq,tqi,tqjb,tqb->tij", T.dx, val, grad, W, optimize=True)
    mat = [_triplets(dofs, dofs, Cl)]
    res = _vector(dofs, np.einsum("tij,tj->ti", Cl, phi[dofs]), sspace.ndofs)
    dadv = []
    if derivs:
        gphi = np.einsum("tqjb,tj->tqb", grad, phi[dofs])
        uval = T.vol(uspace, 1)[0]
        D = np.einsum("tq,tqi,tqjb,tqb->tij", T.dx, val, uval, gphi, optimize=True)
        dadv.append(_triplets(dofs, uspace.cell_dofs, D))
    return mat, res, dadv


# -- standalone assemblers -------------------------------------------------------------
def assemble_mass(space):
    T = _tables_for(space)
    val = T.vol(space, 0)[0]
    if space.vector:
        M = np.einsum("tq,tqia,tqja->tij", T.dx, val, val, optimize=True)
    else:
        M = np.einsum("tq,tqi,tqj->tij", T.dx, val, val, optimize=True)
    d = space.cell_dofs
    return _matrix([_triplets(d, d, M)], (space.ndofs, space.ndofs))


def assemble_a2(space, diffusivity=1.0):
    """Stiffness matrix scaled by ``diffusivity``."""
    T = _tables_for(space)
    grad = T.vol(space, 1)[1]
    K = diffusivity * np.einsum("tq,tqia,tqja->tij", T.dx, grad, grad, optimize=True)
    d = space.cell_dofs
    return _matrix([_triplets(d, d, K)], (space.ndofs, space.ndofs))


def assemble_b(uspace, pspace, params):
    """B[q, j] = (1/rho_m) (q, div phi_j)."""
    T = _tables_for(uspace)
    grad = T.vol(uspace, 1)[1]
    div = grad[..., 0, 0] + grad[..., 1, 1]
    q = T.vol(pspace, 0)[0]
    Bl = np.einsum("tq,tqi,tqj->tij", T.dx, q, div, optimize=True) / params.rho_m
    return _matrix([_triplets(pspace.cell_dofs, uspace.cell_dofs, Bl)], (pspace.ndofs, uspace.ndofs))


def pressure_mean_vector(pspace):
    T = _tables_for(pspace)
    q = T.vol(pspace, 0)[0]
    return _vector(pspace.cell_dofs, np.einsum("tq,tqi->ti", T.dx, q), pspace.ndofs)


def _dirichlet_edge_mask(mesh, tags):
    b = mesh.boundary_edges
    if tags is None:
        return np.ones(len(b), dtype=bool)
    return np.isin(mesh.edge_tags[b], list(tags))


def assemble_a1h(c_field, uspace, params, dirichlet_tags=None):
    """SIP viscous matrix; boundary terms on edges tagged in ``dirichlet_tags`` (all if None)."""
    k = uspace.degree
    T = get_tables(uspace.mesh, k)
    mask = _dirichlet_edge_mask(uspace.mesh, dirichlet_tags)
    mat, _, _ = a1h_parts(T, uspace, c_field.space, params, c_field.coeffs, dirichlet_edges=mask, derivs=False)
    A = _matrix(mat, (uspace.ndofs, uspace.ndofs))
    # the form is symmetric; remove summation-order rounding
    return ((A + A.T) * 0.5).tocsr()


def assemble_c1h(w_field, uspace, params=None):
    T = get_tables(uspace.mesh, uspace.degree)
    mat, _, _ = c1h_parts(T, uspace, w_field.coeffs, np.zeros(uspace.ndofs), derivs=False)
    return _matrix(mat, (uspace.ndofs, uspace.ndofs))


def assemble_c2(advect, shift, sspace):
    T = get_tables(sspace.mesh, sspace.degree)
    mat, _, _ = c2_parts(T, sspace, advect.space, advect.coeffs, shift, np.zeros(sspace.ndofs), derivs=False)
    return _matrix(mat, (sspace.ndofs, sspace.ndofs))


def buoyancy_matrix(uspace, sspace, params):
    """Fs[i, m] = (g . phi_i, psi_m); F(s, c) = alpha Fs s + beta Fs c."""
    T = get_tables(uspace.mesh, uspace.degree)
    val = T.vol(uspace, 0)[0]
    psi = T.vol(sspace, 0)[0]
    gphi = np.einsum("tqia,a->tqi", val, np.asarray(params.gravity))
    L = np.einsum("tq,tqi,tqm->tim", T.dx, gphi, psi, optimize=True)
    return _matrix([_triplets(uspace.cell_dofs, sspace.cell_dofs, L)], (uspace.ndofs, sspace.ndofs))


def assemble_buoyancy(s_field, c_field, uspace, params):
    Fs = buoyancy_matrix(uspace, s_field.space, params)
    return Fs @ (params.alpha * s_field.coeffs + params.beta * c_field.coeffs)


def load_vector(space, f, k=None, degree=None):
    """(f, phi_i) for an analytic function f(x, y) (vector valued for BDM)."""
    k = k or (space.degree + 1 if space.kind == "DG" else space.degree)
    T = get_tables(space.mesh, k, tri_degree=degree)
    val = T.vol(space, 0)[0]
    x, y = T.X[..., 0], T.X[..., 1]
    fv = f(x, y)
    if space.vector:
        F = np.stack([np.broadcast_to(np.asarray(a, dtype=float), x.shape) for a in fv], axis=-1)
        loc = np.einsum("tq,tqia,tqa->ti", T.dx, val, F, optimize=True)
    else:
        F = np.broadcast_to(np.asarray(fv, dtype=float), x.shape)
        loc = np.einsum("tq,tqi,tq->ti", T.dx, val, F, optimize=True)
    return _vector(space.cell_dofs, loc, space.ndofs)


# -- coupled system ---------------------------------------------------------------
@dataclass
class BoundaryConditions:
    """Boundary description.

    velocity: tag -> "dirichlet" (normal strong, tangential Nitsche) or "slip"
    (normal strong only); tags missing from the dict default to dirichlet.
    u_data(x, y, t) gives the Dirichlet velocity (zero when None).
    s_dirichlet / c_dirichlet: tags with strongly imposed scalar values from
    s_data(x, y, t) / c_data(x, y, t); other edges carry zero flux.
    """

    velocity: dict = field(default_factory=dict)
    u_data: Optional[Callable] = None
    s_dirichlet: tuple = ()
    s_data: Optional[Callable] = None
    c_dirichlet: tuple = ()
    c_data: Optional[Callable] = None

    def velocity_kind(self, tag):
        return self.velocity.get(int(tag), "dirichlet")


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    offsets: tuple

    @property
    def residual(self):
        return -self.rhs


@dataclass
class StepData:
    """Time-discretisation data entering one nonlinear solve."""

    t: float
    wt: float = 0.0                     # weight of M y^{n+1}
    hist: Optional[np.ndarray] = None   # history term subtracted from the residual
    load: Optional[np.ndarray] = None   # external sources (f_u, 0, f1, f2, 0)
    g_boundary: Optional[np.ndarray] = None
    dir_values: Optional[np.ndarray] = None


class CoupledSystem:
    """Discrete coupled problem on one mesh: residual and exact Jacobian."""

    def __init__(self, mesh, k, params, bc=None):
        self.mesh = mesh
        self.k = k
        self.params = params
        self.bc = bc or BoundaryConditions()
        self.V = bdm_space(mesh, k)
        self.Q = pressure_space(mesh, k)
        self.S = lagrange_space(mesh, k)
        self.T = get_tables(mesh, k)
        nu, np_, ns = self.V.ndofs, self.Q.ndofs, self.S.ndofs
        self.offsets = (0, nu, nu + np_, nu + np_ + ns, nu + np_ + 2 * ns, nu + np_ + 2 * ns + 1)
        self.N = self.offsets[-1]
        self.MV = assemble_mass(self.V)
        self.MS = assemble_mass(self.S)
        self.KS = assemble_a2(self.S, 1.0)
        self.B = assemble_b(self.V, self.Q, params)
        self.m = pressure_mean_vector(self.Q)
        self.Fs = buoyancy_matrix(self.V, self.S, params)
        b = mesh.boundary_edges
        kinds = np.array([self.bc.velocity_kind(t) for t in mesh.edge_tags[b]])
        self.nitsche_mask = kinds == "dirichlet"
        self.u_dir = self.V.boundary_dofs()
        self.s_dir = self.S.boundary_dofs(self.bc.s_dirichlet) if self.bc.s_dirichlet else np.zeros(0, int)
        self.c_dir = self.S.boundary_dofs(self.bc.c_dirichlet) if self.bc.c_dirichlet else np.zeros(0, int)
        o = self.offsets
        self.dirichlet = np.concatenate([self.u_dir, o[2] + self.s_dir, o[3] + self.c_dir]).astype(np.int64)
        self._bq = _subset_edges(self.T, self.nitsche_mask) if np.any(self.nitsche_mask) else None

    @property
    def ndofs(self):
        return self.N

    def split(self, U):
        o = self.offsets
        return U[o[0]:o[1]], U[o[1]:o[2]], U[o[2]:o[3]], U[o[3]:o[4]], U[o[4]]

    def join(self, u, p, s, c, lam=0.0):
        return np.concatenate([u, p, s, c, [lam]])

    # -- data --------------------------------------------------------------------
    def boundary_data(self, t):
        """(g at Nitsche edge points or None, Dirichlet value vector)."""
        vals = np.zeros(self.N)
        bc = self.bc
        g = None
        if bc.u_data is not None:
            f = lambda x, y: bc.u_data(x, y, t)
            dofs, v = bdm_boundary_values(self.V, f)
            b = self.mesh.boundary_edges
            slip = ~np.isin(dofs // (self.k + 1), b[self.nitsche_mask])
            v = np.where(slip, 0.0, v)
            vals[dofs] = v
            if self._bq is not None:
                X = self._bq.X
                gx, gy = bc.u_data(X[..., 0], X[..., 1], t)
                g = np.stack([np.broadcast_to(gx, X.shape[:2]), np.broadcast_to(gy, X.shape[:2])], axis=-1)
        o = self.offsets
        nodes = None
        for dofs, data, off in ((self.s_dir, bc.s_data, o[2]), (self.c_dir, bc.c_data, o[3])):
            if len(dofs) and data is not None:
                if nodes is None:
                    nodes = self.S.node_coordinates()
                X = nodes[dofs]
                vals[off + dofs] = np.broadcast_to(data(X[:, 0], X[:, 1], t), (len(dofs),))
        return g, vals

    def source_load(self, f_u=None, f1=None, f2=None, t=0.0):
        """Load vector for analytic sources f(x, y, t)."""
        L = np.zeros(self.N)
        o = self.offsets
        if f_u is not None:
            L[o[0]:o[1]] = load_vector(self.V, lambda x, y: f_u(x, y, t), self.k)
        if f1 is not None:
            L[o[2]:o[3]] = load_vector(self.S, lambda x, y: f1(x, y, t), self.k)
        if f2 is not None:
            L[o[3]:o[4]] = load_vector(self.S, lambda x, y: f2(x, y, t), self.k)
        return L

    def mass_apply(self, U):
        """Block mass matrix times U (zero on p and lam)."""
        u, p, s, c, lam = self.split(U)
        return self.join(self.MV @ u, np.zeros_like(p), self.MS @ s, self.MS @ c, 0.0)

    # -- residual / Jacobian -------------------------------------------------------
    def assemble(self, U, data, lin=None, jacobian=True):
        """Residual R(U) and Jacobian dR/dU.

        With ``lin`` given, the convecting velocity and the viscosity argument
        are frozen at ``lin`` and their derivatives are dropped (Picard/Oseen).
        """
        U = np.asarray(U, dtype=float)
        if U.shape != (self.N,):
            raise ValueError(f"state has length {U.shape}, expected {self.N}")
        prm = self.params
        o = self.offsets
        u, p, s, c, lam = self.split(U)
        if lin is not None:
            ul, _, _, cl, _ = self.split(np.asarray(lin, dtype=float))
        else:
            ul, cl = u, c
        full = lin is None
        nu_, np_, ns = self.V.ndofs, self.Q.ndofs, self.S.ndofs
        wt = data.wt
        hist = data.hist if data.hist is not None else np.zeros(self.N)
        load = data.load if data.load is not None else np.zeros(self.N)

        amat, ares, adc = a1h_parts(self.T, self.V, self.S, prm, cl, u, data.g_boundary,
                                    self.nitsche_mask, derivs=full)
        cmat, cres, cw = c1h_parts(self.T, self.V, ul, u, derivs=full)
        smat, sres, sdu = c2_parts(self.T, self.S, self.V, ul, (0.0, 0.0), s, derivs=full)
        kmat, kres, kdu = c2_parts(self.T, self.S, self.V, ul, prm.settling_shift, c, derivs=full)

        Ru = ((wt + prm.drag) * (self.MV @ u) + ares + cres - self.B.T @ p
              - self.Fs @ (prm.alpha * s + prm.beta * c))
        Rp = -(self.B @ u) + self.m * lam
        Rl = np.array([self.m @ p])
        Rs = wt * (self.MS @ s) + (self.KS @ s) / prm.Sc + sres
        Rc = wt * (self.MS @ c) + (self.KS @ c) / (prm.tau * prm.Sc) + kres
        R = np.concatenate([Ru, Rp, Rs, Rc, Rl]) - hist - load

        dvals = data.dir_values if data.dir_values is not None else np.zeros(self.N)
        d = self.dirichlet
        R[d] = U[d] - dvals[d]
        if not jacobian:
            return SparseSystem(None, -R, o)

        shape = (self.N, self.N)

        def shift(parts, ro, co):
            return [(r + ro, c_ + co, v) for r, c_, v in parts]

        parts = []
        parts += shift(amat + cmat + (cw if full else []), 0, 0)
        if full:
            parts += shift(adc, 0, o[3])
            parts += shift(sdu, o[2], 0) + shift(kdu, o[3], 0)
        parts += shift(smat, o[2], o[2]) + shift(kmat, o[3], o[3])
        blocks = _matrix(parts, shape)
        Z = None
        lin_blocks = sp.bmat([
            [(wt + prm.drag) * self.MV, -self.B.T, -prm.alpha * self.Fs, -prm.beta * self.Fs, Z],
            [-self.B, None, None, None, sp.csr_matrix(self.m[:, None])],
            [None, None, wt * self.MS + self.KS / prm.Sc, None, None],
            [None, None, None, wt * self.MS + self.KS / (prm.tau * prm.Sc), None],
            [None, sp.csr_matrix(self.m[None, :]), None, None, sp.csr_matrix((1, 1))],
        ], format="csr")
        J = (blocks + lin_blocks).tocsr()
        keep = np.ones(self.N)
        keep[d] = 0.0
        J = (sp.diags(keep) @ J + sp.diags(1.0 - keep)).tocsr()
        J.sum_duplicates()
        J.sort_indices()
        return SparseSystem(J, -R, o)


def assemble_residual_and_jacobian(system, U, data, lin=None):
    """Functional entry point: SparseSystem at state U."""
    return system.assemble(U, data, lin=lin, jacobian=True)

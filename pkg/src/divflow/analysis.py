"""Error norms, divergence checks, convergence rates and run records."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np

from .assembly import get_tables
from .quadrature import quadrature_rule

CSV_COLUMNS = ["level", "h", "dof", "dt", "e_u", "rate_u", "e_p", "rate_p", "e_s", "rate_s",
               "e_c", "rate_c", "div_sup", "psi", "eff", "newton_iters"]
ERROR_KEYS = ("e_u", "e_p", "e_s", "e_c")


def _degree(space):
    return space.degree + 1 if space.kind == "DG" else space.degree


def error_tables(mesh, k):
    """Quadrature two orders above the assembly rule."""
    return get_tables(mesh, k, tri_degree=2 * k + 4, edge_degree=2 * k + 3)


def _eval_vec(f, X):
    r = f(X[..., 0], X[..., 1])
    return np.stack([np.broadcast_to(np.asarray(a, dtype=float), X.shape[:-1]) for a in r], axis=-1)


def _eval_scalar(f, X):
    return np.broadcast_to(np.asarray(f(X[..., 0], X[..., 1]), dtype=float), X.shape[:-1])


def _eval_grad_vec(f, X):
    """f returns ((du1/dx, du1/dy), (du2/dx, du2/dy))."""
    r = f(X[..., 0], X[..., 1])
    return np.stack([np.stack([np.broadcast_to(np.asarray(a, dtype=float), X.shape[:-1]) for a in row], -1)
                     for row in r], axis=-2)


_REF = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def _children(P):
    m01, m12, m02 = (P[0] + P[1]) / 2, (P[1] + P[2]) / 2, (P[0] + P[2]) / 2
    return [np.array(v) for v in ((P[0], m01, m02), (m01, P[1], m12), (m02, m12, P[2]), (m12, m02, m01))]


def adaptive_integral(mesh, integrand, degree, rtol=1e-4, max_depth=4):
    """Per-element integrals of ``integrand(tris, xhat, X)`` with local subdivision.

    ``integrand`` returns point values of shape (len(tris), nq) at reference
    points ``xhat`` (nq, 2) and physical points ``X`` (len(tris), nq, 2). Each
    element is compared against its four children; elements whose difference
    exceeds ``rtol`` times their share of the global integral are subdivided
    again, up to ``max_depth`` times.
    """
    rule = quadrature_rule("triangle", degree)
    q, w = rule.ref_points, rule.weights
    dets = mesh.dets
    v0 = mesh.vertices[mesh.triangles[:, 0]]
    Jm = mesh.jacobians

    def piece(tris, P):
        A = np.stack([P[1] - P[0], P[2] - P[0]], axis=1)
        xh = P[0] + q @ A.T
        X = v0[tris][:, None, :] + np.einsum("tab,qb->tqa", Jm[tris], xh)
        vals = integrand(tris, xh, X)
        return (vals @ w) * dets[tris] * abs(np.linalg.det(A))

    all_t = np.arange(mesh.nt)
    out = np.zeros(mesh.nt)
    groups = [(all_t, _REF, piece(all_t, _REF))]
    scale = None
    for depth in range(1, max_depth + 1):
        nxt = []
        fine_parts = []
        for tris, P, base in groups:
            kids = [(C, piece(tris, C)) for C in _children(P)]
            fine = sum(v for _, v in kids)
            fine_parts.append((tris, P, base, kids, fine))
        if scale is None:
            scale = max(float(np.sum(np.abs(sum(fp[4] for fp in fine_parts)))), 1e-300)
        for tris, P, base, kids, fine in fine_parts:
            frac = abs(np.linalg.det(np.stack([P[1] - P[0], P[2] - P[0]]))) * mesh.areas[tris] / mesh.areas.sum()
            flag = np.abs(fine - base) > rtol * scale * frac
            if depth == max_depth:
                flag[:] = False
            np.add.at(out, tris[~flag], fine[~flag])
            if np.any(flag):
                for C, v in kids:
                    nxt.append((tris[flag], C, v[flag]))
        if not nxt:
            break
        groups = nxt
    return out


def broken_h1_parts(v, exact=None, exact_grad=None, boundary=True):
    """Squared (L2, gradient, jump) parts of ||exact - v||_{1,T_h}.

    ``exact`` / ``exact_grad`` are analytic callables of (x, y); omitted means
    zero. The jump on boundary edges is the trace itself.
    """
    sp_ = v.space
    k = _degree(sp_)
    T = error_tables(sp_.mesh, k)

    def parts(tris, xh, X):
        val, grad = v.eval_cells(xh, tris=tris, derivs=1)
        ev = -val if exact is None else _eval_vec(exact, X) - val
        eg = -grad if exact_grad is None else _eval_grad_vec(exact_grad, X) - grad
        return np.sum(ev * ev, axis=-1), np.sum(eg * eg, axis=(-2, -1))

    deg = 2 * k + 4
    l2 = float(adaptive_integral(sp_.mesh, lambda *a: parts(*a)[0], deg).sum())
    h1 = float(adaptive_integral(sp_.mesh, lambda *a: parts(*a)[1], deg).sum())
    jmp = 0.0
    eq = T.interior
    if eq.ne:
        vm = eq.field(sp_, v.coeffs, 0, derivs=0)[0]
        vp = eq.field(sp_, v.coeffs, 1, derivs=0)[0]
        d = vm - vp
        jmp += float(np.sum(eq.ds[..., None] * d * d / eq.h[:, None, None]))
    eb = T.boundary
    if boundary and eb.ne:
        vb = eb.field(sp_, v.coeffs, 0, derivs=0)[0]
        d = -vb
        if exact is not None:
            d = d + _eval_vec(exact, eb.X)
        jmp += float(np.sum(eb.ds[..., None] * d * d / eb.h[:, None, None]))
    return l2, h1, jmp


def broken_h1_norm(v, exact=None, exact_grad=None, boundary=True):
    return math.sqrt(sum(broken_h1_parts(v, exact, exact_grad, boundary)))


def _scalar_error(q, exact, tris, xh, X):
    val = q.eval_cells(xh, tris=tris, derivs=0)
    return -val if exact is None else _eval_scalar(exact, X) - val


def l2_error(q, exact=None, subtract_mean=False):
    sp_ = q.space
    mesh = sp_.mesh
    deg = 2 * _degree(sp_) + 4
    err = lambda tris, xh, X: _scalar_error(q, exact, tris, xh, X)
    m = 0.0
    if subtract_mean:
        m = float(adaptive_integral(mesh, err, deg).sum()) / float(mesh.areas.sum())
    sq = adaptive_integral(mesh, lambda tris, xh, X: (err(tris, xh, X) - m) ** 2, deg)
    return math.sqrt(float(sq.sum()))


def h1_error(s, exact=None, exact_grad=None):
    """Full H1 norm of exact - s for a Lagrange field."""
    sp_ = s.space

    def sq(tris, xh, X):
        val, grad = s.eval_cells(xh, tris=tris, derivs=1)
        e = -val if exact is None else _eval_scalar(exact, X) - val
        g = -grad if exact_grad is None else _eval_vec(exact_grad, X) - grad
        return e * e + np.sum(g * g, axis=-1)
    return math.sqrt(float(adaptive_integral(sp_.mesh, sq, 2 * _degree(sp_) + 4).sum()))


def divergence_sup(u):
    """max |div u_h| over the quadrature points of every triangle."""
    sp_ = u.space
    T = error_tables(sp_.mesh, sp_.degree)
    grad = T.field(sp_, u.coeffs, derivs=1)[1]
    div = grad[..., 0, 0] + grad[..., 1, 1]
    return float(np.abs(div).max()) if div.size else 0.0


@dataclass
class NormSet:
    e_u: float
    e_p: float
    e_s: float
    e_c: float
    div_sup: float = 0.0

    def total(self):
        return math.sqrt(self.e_u ** 2 + self.e_p ** 2 + self.e_s ** 2 + self.e_c ** 2)


def error_norms(fields, exact, t=0.0, subtract_pressure_mean=True):
    """Errors of (u_h, p_h, s_h, c_h) against an ExactSolution at time t."""
    u, p, s, c = fields
    fx = lambda f: (lambda x, y: f(x, y, t))
    e_u = broken_h1_norm(u, fx(exact.u), fx(exact.grad_u))
    e_p = l2_error(p, fx(exact.p), subtract_pressure_mean)
    e_s = h1_error(s, fx(exact.s), fx(exact.grad_s))
    e_c = h1_error(c, fx(exact.c), fx(exact.grad_c))
    return NormSet(e_u, e_p, e_s, e_c, divergence_sup(u))


def rate(e, e_prev, x, x_prev, mode="h"):
    """Uniform: log(e/e~)/log(h/h~); adaptive: -2 log(e/e~)/log(DoF/DoF~)."""
    if e <= 0 or e_prev <= 0:
        raise ValueError("errors must be positive to compute rates")
    if mode == "h":
        return math.log(e / e_prev) / math.log(x / x_prev)
    if mode == "dof":
        return -2.0 * math.log(e / e_prev) / math.log(x / x_prev)
    raise ValueError(f"unknown rate mode {mode!r}")


@dataclass
class RunRecord:
    """Rows of a convergence or adaptivity study."""

    rows: list = field(default_factory=list)
    mode: str = "h"
    meta: dict = field(default_factory=dict)

    def add(self, **row):
        self.rows.append(dict(row))

    def __len__(self):
        return len(self.rows)

    def column(self, key):
        return [r.get(key) for r in self.rows]

    def compute_rates(self):
        """Fill rate columns between consecutive rows."""
        key = "h" if self.mode == "h" else "dof"
        for i, row in enumerate(self.rows):
            for ek in ERROR_KEYS:
                rk = "rate_" + ek[2:]
                if i == 0:
                    row[rk] = None
                    continue
                prev = self.rows[i - 1]
                if prev.get(ek) is None or row.get(ek) is None or prev[key] == row[key]:
                    row[rk] = None
                    continue
                row[rk] = rate(row[ek], prev[ek], row[key], prev[key], self.mode)
        return self

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r.get(c)) for c in CSV_COLUMNS])


def rates(record):
    return record.compute_rates()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (float(v) if v not in ("", None) else None) for k, v in r.items()})
    return out

"""Residual a posteriori indicators, time indicators and marking."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .analysis import error_tables, _eval_vec, _eval_scalar


@dataclass
class ElementIndicators:
    """Squared per-element contributions Psi_R^2, Psi_e^2, Psi_J^2."""

    mesh: object
    psi_R: np.ndarray
    psi_e: np.ndarray
    psi_J: np.ndarray
    oscillation: float = 0.0

    @property
    def total(self):
        """Psi_K^2 per element."""
        return self.psi_R + self.psi_e + self.psi_J

    @property
    def psi_K(self):
        return np.sqrt(self.total)

    @property
    def psi(self):
        return math.sqrt(float(self.total.sum()))

    def __len__(self):
        return len(self.psi_R)

    def write_csv(self, path):
        """Columns element_id, psi_R, psi_e, psi_J, psi_total (square roots of the parts)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["element_id", "psi_R", "psi_e", "psi_J", "psi_total"])
            for i, (a, b, c, d) in enumerate(zip(self.psi_R, self.psi_e, self.psi_J, self.total)):
                w.writerow([i, repr(math.sqrt(a)), repr(math.sqrt(b)), repr(math.sqrt(c)), repr(math.sqrt(d))])


def _check_mesh(fields):
    mesh = fields[0].space.mesh
    for f in fields[1:]:
        if f.space.mesh is not mesh:
            raise ValueError("all fields must live on the same mesh")
    return mesh


def _tdata(f, t):
    return None if f is None else (lambda x, y: f(x, y, t))


def local_projection(T, mesh, vals, k):
    """Element-wise L2 projection onto P_k of values at the quadrature points of ``T``.

    ``vals`` has shape (nt, nq) or (nt, nq, m); the result is evaluated at the
    same points.
    """
    X = (T.X - mesh.centroids[:, None, :]) / mesh.diameters[:, None, None]
    powers = [(i, j) for i in range(k + 1) for j in range(k + 1 - i)]
    B = np.stack([X[..., 0] ** i * X[..., 1] ** j for i, j in powers], axis=-1)     # t q b
    G = np.einsum("tq,tqa,tqb->tab", T.dx, B, B)
    v = vals if vals.ndim == 3 else vals[..., None]
    rhs = np.einsum("tq,tqa,tqm->tam", T.dx, B, v)
    coef = np.linalg.solve(G, rhs)
    out = np.einsum("tqa,tam->tqm", B, coef)
    return out if vals.ndim == 3 else out[..., 0]


def steady_indicators(fields, params, sources=None, t=0.0, bc=None, time_residual=None, k=None):
    """Element indicators of the steady residual estimator.

    ``fields`` = (u_h, p_h, s_h, c_h). Analytic sources (x, y, t) are replaced
    by their element-wise L2 projections f_h onto P_k and the oscillation
    ||f - f_h|| is returned separately. ``time_residual`` is an
    optional triple (du, ds, dc) of fields already divided by the step, which
    enters the volume residuals with a minus sign.
    """
    u, p, s, c = fields
    mesh = _check_mesh(fields)
    k = k or u.space.degree
    T = error_tables(mesh, k)
    prm = params
    V, Q, S = u.space, p.space, s.space
    nt = mesh.nt
    hK = mesh.diameters

    uv, ug, uh = T.field(V, u.coeffs, derivs=2)
    pg = T.field(Q, p.coeffs, derivs=1)[1]
    sv, sg, sh = T.field(S, s.coeffs, derivs=2)
    cv, cg, ch = T.field(S, c.coeffs, derivs=2)
    nu = prm.viscosity(cv, T.X)
    dnu = prm.viscosity.dnu(cv, T.X)

    g = np.asarray(prm.gravity)
    RK = (prm.alpha * sv + prm.beta * cv)[..., None] * g
    lap_u = uh[..., 0, 0] + uh[..., 1, 1]
    RK = RK + nu[..., None] * lap_u + dnu[..., None] * np.einsum("tqab,tqb->tqa", ug, cg)
    RK = RK - np.einsum("tqab,tqb->tqa", ug, uv) - pg / prm.rho_m - prm.drag * uv
    shift = prm.settling_shift
    R1 = sh[..., 0, 0] + sh[..., 1, 1]
    R1 = R1 / prm.Sc - np.einsum("tqa,tqa->tq", uv, sg)
    R2 = (ch[..., 0, 0] + ch[..., 1, 1]) / (prm.tau * prm.Sc) - np.einsum("tqa,tqa->tq", uv + shift, cg)
    osc2 = 0.0
    if sources is not None:
        for f, kind in ((sources.f_u, "u"), (sources.f1, "s"), (sources.f2, "c")):
            if f is None:
                continue
            ft = _tdata(f, t)
            if kind == "u":
                fx = _eval_vec(ft, T.X)
                fq = local_projection(T, mesh, fx, k)
                RK = RK + fq
            else:
                fx = _eval_scalar(ft, T.X)
                fq = local_projection(T, mesh, fx, k)
                if kind == "s":
                    R1 = R1 + fq
                else:
                    R2 = R2 + fq
            d = (fx - fq).reshape(nt, T.X.shape[1], -1)
            osc2 += float(np.einsum("tq,tqa->", T.dx, d * d))
    if time_residual is not None:
        du, ds, dc = time_residual
        RK = RK - T.field(V, du.coeffs, derivs=0)[0]
        R1 = R1 - T.field(S, ds.coeffs, derivs=0)[0]
        R2 = R2 - T.field(S, dc.coeffs, derivs=0)[0]
    vol = (np.einsum("tq,tqa->t", T.dx, RK * RK) + np.einsum("tq,tq->t", T.dx, R1 * R1)
           + np.einsum("tq,tq->t", T.dx, R2 * R2))
    psi_R = hK ** 2 * vol

    psi_e = np.zeros(nt)
    psi_J = np.zeros(nt)
    eq = T.interior
    if eq.ne:
        n = eq.n
        ugm = eq.field(V, u.coeffs, 0, 1)
        ugp = eq.field(V, u.coeffs, 1, 1)
        pm = eq.field(Q, p.coeffs, 0, 0)[0]
        pp = eq.field(Q, p.coeffs, 1, 0)[0]
        sgm = eq.field(S, s.coeffs, 0, 1)[1]
        sgp = eq.field(S, s.coeffs, 1, 1)[1]
        cvm, cgm = eq.field(S, c.coeffs, 0, 1)
        cgp = eq.field(S, c.coeffs, 1, 1)[1]
        nue = prm.viscosity(cvm, eq.X)
        Re = 0.5 * (((pm - pp) / prm.rho_m)[..., None] * n[:, None, :]
                    - nue[..., None] * np.einsum("eqab,eb->eqa", ugm[1] - ugp[1], n))
        R1e = 0.5 / prm.Sc * np.einsum("eqa,ea->eq", sgm - sgp, n)
        R2e = 0.5 / (prm.tau * prm.Sc) * np.einsum("eqa,ea->eq", cgm - cgp, n)
        ed = eq.h * (np.einsum("eq,eqa->e", eq.ds, Re * Re) + np.einsum("eq,eq->e", eq.ds, R1e ** 2)
                     + np.einsum("eq,eq->e", eq.ds, R2e ** 2))
        jump = ugm[0] - ugp[0]
        ej = np.einsum("eq,eqa->e", eq.ds, jump * jump) / eq.h
        for side in (0, 1):
            psi_e += np.bincount(eq.tris[:, side], ed, minlength=nt)
            psi_J += np.bincount(eq.tris[:, side], ej, minlength=nt)
    eb = T.boundary
    if eb.ne:
        ub = eb.field(V, u.coeffs, 0, 0)[0]
        d = ub.copy()
        kinds = np.array(["dirichlet"] * eb.ne) if bc is None else \
            np.array([bc.velocity_kind(tg) for tg in mesh.edge_tags[eb.edges]])
        if bc is not None and bc.u_data is not None:
            gx, gy = bc.u_data(eb.X[..., 0], eb.X[..., 1], t)
            d = d - np.stack([np.broadcast_to(gx, eb.X.shape[:2]), np.broadcast_to(gy, eb.X.shape[:2])], -1)
        slip = kinds == "slip"
        if np.any(slip):
            dn = np.einsum("eqa,ea->eq", d, eb.n)
            d[slip] = dn[slip][..., None] * eb.n[slip][:, None, :]
        ej = np.einsum("eq,eqa->e", eb.ds, d * d) / eb.h
        psi_J += np.bincount(eb.tris[:, 0], ej, minlength=nt)
    return ElementIndicators(mesh, psi_R, psi_e, psi_J, math.sqrt(osc2))


# -- time indicators ---------------------------------------------------------------
@dataclass
class TimeIndicators:
    xi1: float
    xi2: float
    xi3: float

    @property
    def xi_sq(self):
        return self.xi1 + self.xi2 + self.xi3

    @property
    def xi(self):
        return math.sqrt(self.xi_sq)


def _star_sq(v):
    """Squared broken seminorm: gradient part plus h_e^{-1} jumps (boundary included)."""
    from .analysis import broken_h1_parts
    _, h1, jmp = broken_h1_parts(v)
    return h1 + jmp


def _h1_sq(s):
    from .analysis import h1_error
    return h1_error(s) ** 2


def _hjump_sq(v):
    """sum_e h_e ||[[v]]||^2 for a BDM field (trace on boundary edges)."""
    T = error_tables(v.space.mesh, v.space.degree)
    tot = 0.0
    eq = T.interior
    if eq.ne:
        d = eq.field(v.space, v.coeffs, 0, 0)[0] - eq.field(v.space, v.coeffs, 1, 0)[0]
        tot += float(np.sum(eq.h[:, None] * eq.ds * np.sum(d * d, axis=-1)))
    eb = T.boundary
    if eb.ne:
        d = eb.field(v.space, v.coeffs, 0, 0)[0]
        tot += float(np.sum(eb.h[:, None] * eb.ds * np.sum(d * d, axis=-1)))
    return tot


def _edge_jump_sq(mesh, k, func, weight_h=+1):
    """sum_e h_e^{weight} ||[[func]]||^2 for a pointwise vector function evaluated from each side."""
    T = error_tables(mesh, k)
    tot = 0.0
    for eq, sides in ((T.interior, (0, 1)), (T.boundary, (0,))):
        if eq.ne == 0:
            continue
        vals = []
        for side in sides:
            cen = mesh.centroids[eq.tris[:, side]]
            P = eq.X + 1e-9 * (cen[:, None, :] - eq.X)
            vals.append(func(P.reshape(-1, 2)).reshape(eq.X.shape))
        d = vals[0] - vals[1] if len(vals) == 2 else vals[0]
        tot += float(np.sum(eq.h[:, None] ** weight_h * eq.ds * np.sum(d * d, axis=-1)))
    return tot


def time_indicator(level_k, level_km1, dt, u_km1_original=None):
    """Xi_k components.

    level_k = (u^k, s^k, c^k) and level_km1 = (I^k u^{k-1}, s^{k-1}, c^{k-1}),
    all on the mesh of step k. ``u_km1_original`` is the untransferred old
    velocity (for the transfer jump correction); omitted means no mesh change.
    """
    uk, sk, ck = level_k
    uo, so, co = level_km1
    du = uk - uo
    mesh = uk.space.mesh
    kdeg = uk.space.degree
    xi1 = _star_sq(du) + _hjump_sq(du) / dt ** 2
    if u_km1_original is not None and u_km1_original.space.mesh is not mesh:
        diff = lambda P: uo(P) - u_km1_original(P)
        xi1 += _edge_jump_sq(mesh, kdeg, diff) / dt ** 2
    xi2 = _h1_sq(sk - so)
    xi3 = _h1_sq(ck - co)
    return TimeIndicators(dt * xi1, dt * xi2, dt * xi3)


@dataclass
class UpsilonReport:
    upsilon: float
    xi: float
    steps: list = field(default_factory=list)


def accumulate_upsilon(steps):
    """Upsilon and Xi from per-step data.

    Each step is a dict with keys ``dt``, ``new`` and ``old`` (ElementIndicators
    at the new level and at the transferred old level) and optionally ``time``
    (TimeIndicators).
    """
    ups2 = 0.0
    xi2 = 0.0
    rows = []
    for st in steps:
        a = float(st["new"].total.sum())
        b = float(st["old"].total.sum())
        contrib = st["dt"] * (a + b)
        x = st["time"].xi_sq if st.get("time") is not None else 0.0
        ups2 += contrib
        xi2 += x
        rows.append({"dt": st["dt"], "upsilon_sq": contrib, "xi_sq": x})
    return UpsilonReport(math.sqrt(ups2), math.sqrt(xi2), rows)


def step_indicators(new_fields, old_fields, dt, params, sources=None, t_new=0.0, t_old=0.0, bc=None):
    """Indicators Upsilon_k at the new level and at the transferred old level.

    Both carry the time residual (y^k - I y^{k-1}) / dt.
    """
    u, p, s, c = new_fields
    uo, po, so, co = old_fields
    tr = ((u - uo) * (1.0 / dt), (s - so) * (1.0 / dt), (c - co) * (1.0 / dt))
    new = steady_indicators(new_fields, params, sources, t_new, bc, time_residual=tr)
    old = steady_indicators(old_fields, params, sources, t_old, bc, time_residual=tr)
    return new, old


# -- marking / effectivity ---------------------------------------------------------------
def dorfler_mark(ind, gamma_ratio):
    """Boolean marks for Psi_K >= gamma_ratio * max_L Psi_L.

    ``ind`` is an ElementIndicators or an array of (unsquared) Psi_K values.
    """
    psi = ind.psi_K if isinstance(ind, ElementIndicators) else np.asarray(ind, dtype=float)
    if psi.size == 0:
        raise ValueError("empty indicator set")
    if not 0 < gamma_ratio <= 1:
        raise ValueError("gamma_ratio must lie in (0, 1]")
    return psi >= gamma_ratio * psi.max()


def effectivity(total_error, estimator):
    if estimator == 0:
        raise ZeroDivisionError("estimator is zero")
    return total_error / estimator

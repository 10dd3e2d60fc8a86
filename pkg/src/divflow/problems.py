"""Experiment registry: manufactured solutions, parameter sets and run drivers."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import sympy as sp

from . import mesh as M
from .analysis import RunRecord, error_norms, divergence_sup, NormSet
from .assembly import BoundaryConditions, CoupledSystem, PhysicalParams, Viscosity
from .estimators import (accumulate_upsilon, dorfler_mark, effectivity, steady_indicators,
                         step_indicators, time_indicator)
from .fem import DiscreteField, bdm_interpolate, l2_project, lagrange_interpolate, transfer_field
from .timestepping import BDF2, BE, STEADY, NewtonDivergence, Sources, StepState, advance, solve_steady

log = logging.getLogger(__name__)

X, Y, T = sp.symbols("x y t", real=True)
ALL_SIDES = (M.BOTTOM, M.RIGHT, M.TOP, M.LEFT, M.REENTRANT)
DIV_TOL = 1e-9


class ExperimentError(RuntimeError):
    """Solver failure with level/step context."""


# -- exact solutions and forcing -------------------------------------------------------
def _lam(expr):
    f = sp.lambdify((X, Y, T), expr, "numpy")
    return f


class ExactSolution:
    """Analytic (u, p, s, c) in x, y, t with gradients, from sympy expressions."""

    def __init__(self, u, p, s, c):
        self.exprs = {"u": tuple(sp.sympify(e) for e in u), "p": sp.sympify(p),
                      "s": sp.sympify(s), "c": sp.sympify(c)}
        u1, u2 = self.exprs["u"]
        self._u = _lam([u1, u2])
        self._gu = _lam([[sp.diff(u1, X), sp.diff(u1, Y)], [sp.diff(u2, X), sp.diff(u2, Y)]])
        self.p = _lam(self.exprs["p"])
        self.s = _lam(self.exprs["s"])
        self.c = _lam(self.exprs["c"])
        self._gs = _lam([sp.diff(self.exprs["s"], X), sp.diff(self.exprs["s"], Y)])
        self._gc = _lam([sp.diff(self.exprs["c"], X), sp.diff(self.exprs["c"], Y)])
        self._gp = _lam([sp.diff(self.exprs["p"], X), sp.diff(self.exprs["p"], Y)])

    def u(self, x, y, t):
        return tuple(self._u(x, y, t))

    def grad_u(self, x, y, t):
        return tuple(tuple(r) for r in self._gu(x, y, t))

    def grad_s(self, x, y, t):
        return tuple(self._gs(x, y, t))

    def grad_c(self, x, y, t):
        return tuple(self._gc(x, y, t))

    def grad_p(self, x, y, t):
        return tuple(self._gp(x, y, t))

    def at(self, t):
        """Callables of (x, y) at fixed time."""
        return (lambda x, y: self.u(x, y, t), lambda x, y: self.p(x, y, t),
                lambda x, y: self.s(x, y, t), lambda x, y: self.c(x, y, t))


def zero_solution():
    return ExactSolution((0, 0), 0, 0, 0)


def manufactured_forcing(exact, params):
    """Sources making ``exact`` solve the strong equations.

    f   = u_t + (grad u) u - div(nu(c) grad u) + grad p / rho_m - (alpha s + beta c) g + drag u
    f_1 = s_t + u . grad s - lap s / Sc
    f_2 = c_t + (u - v_p e_z) . grad c - lap c / (tau Sc)
    """
    prm = params
    u1, u2 = exact.exprs["u"]
    p, s, c = exact.exprs["p"], exact.exprs["s"], exact.exprs["c"]
    visc = prm.viscosity
    if visc.sym is None:
        raise ValueError(f"viscosity {visc.name!r} has no symbolic form")
    nu = visc.sym(c, exp=sp.exp)
    g = prm.gravity
    buoy = prm.alpha * s + prm.beta * c
    fu = []
    for a, ua in enumerate((u1, u2)):
        conv = u1 * sp.diff(ua, X) + u2 * sp.diff(ua, Y)
        visc_term = sp.diff(nu * sp.diff(ua, X), X) + sp.diff(nu * sp.diff(ua, Y), Y)
        dp = sp.diff(p, (X, Y)[a])
        fu.append(sp.diff(ua, T) + conv - visc_term + dp / prm.rho_m - buoy * g[a] + prm.drag * ua)
    lap = lambda q: sp.diff(q, X, 2) + sp.diff(q, Y, 2)
    f1 = sp.diff(s, T) + u1 * sp.diff(s, X) + u2 * sp.diff(s, Y) - lap(s) / prm.Sc
    f2 = (sp.diff(c, T) + u1 * sp.diff(c, X) + (u2 - prm.v_p) * sp.diff(c, Y)
          - lap(c) / (prm.tau * prm.Sc))
    fu_l, f1_l, f2_l = _lam(fu), _lam(f1), _lam(f2)
    return Sources(lambda x, y, t: tuple(fu_l(x, y, t)), f1_l, f2_l)


# finite-difference oracle for the strong operator
_D1 = np.array([-1, 9, -45, 0, 45, -9, 1]) / 60.0
_OFF = np.arange(-3, 4)


def _fd(f, x, y, h, axis):
    """Sixth-order central first derivative of f(x, y) along ``axis``."""
    tot = 0.0
    for w, o in zip(_D1, _OFF):
        if w == 0:
            continue
        tot = tot + w * (f(x + o * h, y) if axis == 0 else f(x, y + o * h))
    return tot / h


def strong_residual_fd(exact, sources, params, x, y, t, h=2e-3):
    """Forcing minus the finite-difference strong operator at (x, y, t).

    Only pointwise values of the exact solution are used.
    """
    prm = params
    us = lambda i: (lambda a, b: np.asarray(exact.u(a, b, t)[i], dtype=float))
    cf = lambda a, b: np.asarray(exact.c(a, b, t), dtype=float)
    sf = lambda a, b: np.asarray(exact.s(a, b, t), dtype=float)
    pf = lambda a, b: np.asarray(exact.p(a, b, t), dtype=float)
    nu = lambda a, b: prm.viscosity(cf(a, b), np.stack(np.broadcast_arrays(a, b), -1))
    dt_ = lambda q: sum(w * np.asarray(q(t + o * h), dtype=float) for w, o in zip(_D1, _OFF)) / h
    u = [us(0)(x, y), us(1)(x, y)]
    res = []
    g = prm.gravity
    buoy = prm.alpha * sf(x, y) + prm.beta * cf(x, y)
    for a in range(2):
        ua = us(a)
        conv = u[0] * _fd(ua, x, y, h, 0) + u[1] * _fd(ua, x, y, h, 1)
        flux_x = lambda p_, q_: nu(p_, q_) * _fd(ua, p_, q_, h, 0)
        flux_y = lambda p_, q_: nu(p_, q_) * _fd(ua, p_, q_, h, 1)
        visc = _fd(flux_x, x, y, h, 0) + _fd(flux_y, x, y, h, 1)
        ut = dt_(lambda tt: exact.u(x, y, tt)[a])
        op = ut + conv - visc + _fd(pf, x, y, h, a) / prm.rho_m - buoy * g[a] + prm.drag * u[a]
        f = np.asarray(sources.f_u(x, y, t)[a], dtype=float)
        res.append(f - op)

    def lap(q):
        return (_fd(lambda p_, q_: _fd(q, p_, q_, h, 0), x, y, h, 0)
                + _fd(lambda p_, q_: _fd(q, p_, q_, h, 1), x, y, h, 1))

    st = dt_(lambda tt: exact.s(x, y, tt))
    ct = dt_(lambda tt: exact.c(x, y, tt))
    op1 = st + u[0] * _fd(sf, x, y, h, 0) + u[1] * _fd(sf, x, y, h, 1) - lap(sf) / prm.Sc
    op2 = (ct + u[0] * _fd(cf, x, y, h, 0) + (u[1] - prm.v_p) * _fd(cf, x, y, h, 1)
           - lap(cf) / (prm.tau * prm.Sc))
    res.append(np.asarray(sources.f1(x, y, t), dtype=float) - op1)
    res.append(np.asarray(sources.f2(x, y, t), dtype=float) - op2)
    return np.array(res, dtype=float)


def oracle_gate(spec, npoints=20, seed=12345, tol=1e-6):
    """Largest relative FD residual of the registered forcing at random points.

    Raises if it exceeds ``tol``; returns the value otherwise.
    """
    if spec.exact is None:
        return 0.0
    rng = np.random.Generator(np.random.PCG64(seed))
    (x0, x1), (y0, y1) = spec.bbox
    worst = 0.0
    n = 0
    while n < npoints:
        x = rng.uniform(x0 + 0.05, x1 - 0.05)
        y = rng.uniform(y0 + 0.05, y1 - 0.05)
        if spec.exclude is not None and spec.exclude(x, y):
            continue
        t = rng.uniform(0.1, 1.0) if spec.t_end > 0 else 0.0
        r = strong_residual_fd(spec.exact, spec.sources, spec.params, x, y, t)
        scale = max(1.0, float(np.max(np.abs(np.array(spec.sources.f_u(x, y, t), dtype=float)))),
                    abs(float(spec.sources.f1(x, y, t))), abs(float(spec.sources.f2(x, y, t))))
        worst = max(worst, float(np.max(np.abs(r))) / scale)
        n += 1
    if worst >= tol:
        raise ExperimentError(f"{spec.name}: forcing fails the finite-difference check ({worst:.2e})")
    return worst


# -- problem specifications --------------------------------------------------------------
@dataclass
class ProblemSpec:
    name: str
    mesh_builder: Callable          # level -> Mesh (uniform hierarchy)
    params: PhysicalParams
    bc: BoundaryConditions
    driver: str = "convergence"     # convergence | adaptive | transient-estimator | demo
    k: int = 2
    exact: Optional[ExactSolution] = None
    sources: Optional[Sources] = None
    t_end: float = 0.0              # 0 means steady
    dt: Optional[float] = None
    dt_rule: Optional[Callable] = None
    scheme: str = BDF2
    startup_substeps: object = "auto"
    refinement: str = "uniform"     # uniform | adaptive
    gamma: float = 1e-4
    levels: int = 4
    seed: int = 0
    solver: str = "newton"
    initial: Optional[Callable] = None   # (spec, system) -> U0
    adapt_each_step: bool = False
    element_budget: Optional[float] = None   # demo refinement stops at this multiple of the initial element count
    bbox: tuple = ((0.0, 1.0), (0.0, 1.0))
    exclude: Optional[Callable] = None
    bounds: Optional[tuple] = None       # allowed (lo, hi) for s and c in demos
    notes: dict = field(default_factory=dict)

    @property
    def steady(self):
        return self.t_end == 0


def _dirichlet_bc(exact, tags=ALL_SIDES):
    return BoundaryConditions(velocity={t: "dirichlet" for t in tags}, u_data=exact.u,
                              s_dirichlet=tuple(tags), s_data=exact.s,
                              c_dirichlet=tuple(tags), c_data=exact.c)


def _unit_square(level):
    n = 2 * 2 ** level
    return M.build_rectangle_mesh(1.0, 1.0, n, n)


def example1(**kw):
    prm = PhysicalParams(viscosity=Viscosity.const(1.0), rho_m=1.5, gravity=(0.0, -1.0), Sc=1.0,
                         tau=0.5, v_p=1.0, alpha=0.5, beta=0.5, a0=50.0)
    pi = sp.pi
    ex = ExactSolution(
        (sp.sin(pi * X) ** 2 * sp.sin(pi * Y) ** 2 * sp.cos(pi * Y) * sp.sin(T),
         -sp.Rational(1, 3) * sp.sin(2 * pi * X) * sp.sin(pi * Y) ** 3 * sp.sin(T)),
        (X ** 4 - Y ** 4) * sp.sin(T),
        sp.Rational(1, 2) * (1 + sp.sin(pi / 2 * X * Y)) * sp.exp(-T),
        sp.Rational(1, 2) * (1 + sp.cos(pi / 4 * X * Y)) * sp.exp(-T))
    spec = ProblemSpec("example1", _unit_square, prm, _dirichlet_bc(ex), "convergence", k=2, exact=ex,
                       sources=manufactured_forcing(ex, prm), t_end=2.0,
                       dt_rule=lambda h: math.sqrt(2.0) * h, scheme=BDF2, levels=5)
    return _override(spec, kw)


def _lshape(level):
    m = M.build_lshape_mesh(1, pattern="crossed")
    for _ in range(level):
        m = M.refine_uniform(m)
    return m


def example2(**kw):
    prm = PhysicalParams(viscosity=Viscosity.exponential(0.1, 4.0), rho_m=1.5, gravity=(0.0, -1.0),
                         Sc=1.0, tau=0.5, v_p=1.0, alpha=0.5, beta=0.5, a0=5.0, nitsche=1e3)
    pi = sp.pi
    ex = ExactSolution(
        (sp.cos(pi * X) * sp.sin(pi * Y), -sp.sin(pi * X) * sp.cos(pi * Y)),
        (2 + sp.sin(X * Y)) / ((X - sp.Rational(1, 50)) ** 2 + (Y - sp.Rational(1, 50)) ** 2),
        sp.exp(-150 * (X - sp.Rational(1, 100)) ** 2 - 150 * (Y - sp.Rational(1, 100)) ** 2),
        sp.Rational(1, 10) + sp.cos(pi * X) * sp.sin(pi * Y / 2)
        / (25 * ((X - sp.Rational(1, 10)) ** 2 + (Y - sp.Rational(1, 10)) ** 2)))
    spec = ProblemSpec("example2", _lshape, prm, _dirichlet_bc(ex), "adaptive", k=1, exact=ex,
                       sources=manufactured_forcing(ex, prm), t_end=0.0, scheme=STEADY,
                       refinement="adaptive", gamma=1e-4, levels=7,
                       bbox=((-1.0, 1.0), (-1.0, 1.0)),
                       exclude=lambda x, y: (x > -0.05 and y > -0.05) or x * x + y * y < 0.04)
    return _override(spec, kw)


def example3(**kw):
    base = example1()
    prm = base.params
    pi = sp.pi
    ex = ExactSolution(
        (sp.sin(T) * sp.cos(pi * X) * sp.sin(pi * Y), -sp.sin(T) * sp.sin(pi * X) * sp.cos(pi * Y)),
        sp.cos(T) * (X ** 4 - Y ** 4),
        base.exact.exprs["s"], base.exact.exprs["c"])
    spec = ProblemSpec("example3", _unit_square, prm, _dirichlet_bc(ex), "transient-estimator", k=1,
                       exact=ex, sources=manufactured_forcing(ex, prm), t_end=0.01, dt=0.002,
                       scheme=BE, levels=6)
    return _override(spec, kw)


def example4(**kw):
    Lx, Ly = 40.0, 300.0
    A0, A1, sig = 2.86, 0.5, 0.35
    prm = PhysicalParams(viscosity=Viscosity.const(1e-3), rho_m=1.0, gravity=(0.0, -9.8), Sc=7.0,
                         tau=25.0, v_p=0.04, alpha=-2.0, beta=0.5, a0=10.0)
    bc = BoundaryConditions(velocity={t: "dirichlet" for t in ALL_SIDES})

    def initial(spec, sysm):
        s0 = lagrange_interpolate(sysm.S, lambda x, y: 1.0 - y / Ly + 0 * x)
        c0 = lagrange_interpolate(sysm.S, lambda x, y: A0 * np.exp(-y ** 2 / sig ** 2) + A1 * np.sin(x))
        return sysm.join(np.zeros(sysm.V.ndofs), np.zeros(sysm.Q.ndofs), s0.coeffs, c0.coeffs)

    spec = ProblemSpec("example4", lambda level: M.build_rectangle_mesh(Lx, Ly, 8 * 2 ** level, 60 * 2 ** level),
                       prm, bc, "demo", k=1, t_end=6.0, dt=0.1, scheme=BDF2, levels=1, initial=initial,
                       bbox=((0, Lx), (0, Ly)))
    return _override(spec, kw)


def lattice_field(rng, bbox, shape):
    """Piecewise constant field, uniform on [0, 1], on a regular lattice over bbox."""
    (x0, x1), (y0, y1) = bbox
    nx, ny = shape
    vals = rng.uniform(0.0, 1.0, size=(nx, ny))

    def f(x, y):
        i = np.clip(((np.asarray(x) - x0) / (x1 - x0) * nx).astype(int), 0, nx - 1)
        j = np.clip(((np.asarray(y) - y0) / (y1 - y0) * ny).astype(int), 0, ny - 1)
        return vals[i, j]
    return f


def example5(seed=0, eps=50.0, drag=1.0, **kw):
    H, L = 1000.0, 2000.0
    seqs = np.random.SeedSequence(seed).spawn(3)
    stream = lambda i: np.random.Generator(np.random.PCG64(seqs[i]))
    zeta_nu = lattice_field(stream(0), ((0, L), (0, H)), (64, 32))
    prm = PhysicalParams(viscosity=Viscosity.spatial(lambda x, y: 1.0 + 0.25 * zeta_nu(x, y)),
                         rho_m=1.0, gravity=(0.0, -1.0), Sc=1.0 / 8.0, tau=3.2, v_p=0.0,
                         alpha=5.0, beta=-1.0, a0=10.0, drag=drag)
    top = lambda x, y, t: np.where(np.asarray(y) > H / 2, 1.0, 0.0) + 0 * np.asarray(x)
    bc = BoundaryConditions(velocity={t: "slip" for t in ALL_SIDES},
                            s_dirichlet=(M.BOTTOM, M.TOP), s_data=top,
                            c_dirichlet=(M.BOTTOM, M.TOP), c_data=top)

    def initial(spec, sysm):
        nodes = sysm.S.node_coordinates()
        layer = nodes[:, 1] >= H - eps
        zs = stream(1).uniform(0.0, 1.0, size=len(nodes))
        zc = stream(2).uniform(0.0, 1.0, size=len(nodes))
        s0 = np.where(layer, 0.999 + 0.001 * zs, 0.0)
        c0 = np.where(layer, 0.999 + 0.001 * zc, 0.0)
        return sysm.join(np.zeros(sysm.V.ndofs), np.zeros(sysm.Q.ndofs), s0, c0)

    spec = ProblemSpec("example5", lambda level: M.build_rectangle_mesh(L, H, 73 * 2 ** level, 36 * 2 ** level),
                       prm, bc, "demo", k=1, t_end=200.0, dt=20.0, scheme=BE, levels=1, seed=seed,
                       solver="picard", initial=initial, adapt_each_step=True, gamma=0.5, element_budget=2.0,
                       bbox=((0, L), (0, H)), bounds=(-0.1, 1.1))
    return _override(spec, kw)


PROBLEMS = {"example1": example1, "example2": example2, "example3": example3,
            "example4": example4, "example5": example5}


def _override(spec, kw):
    """Apply overrides; a0 and nitsche go into the parameter set."""
    kw = {k: v for k, v in kw.items() if v is not None}
    pk = {k: kw.pop(k) for k in ("a0", "nitsche", "drag") if k in kw}
    if pk:
        spec = replace(spec, params=replace(spec.params, **pk))
        if spec.exact is not None:
            spec = replace(spec, sources=manufactured_forcing(spec.exact, spec.params))
    if kw:
        bad = set(kw) - set(ProblemSpec.__dataclass_fields__)
        if bad:
            raise ValueError(f"unknown problem option(s): {sorted(bad)}")
        spec = replace(spec, **kw)
    return spec


def get_problem(name, **overrides):
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return factory(**overrides)


# -- helpers ---------------------------------------------------------------------------
def _exact_initial(spec, sysm, t=0.0):
    """Interpolants of the exact solution (pressure by L2 projection, mean removed)."""
    ex = spec.exact
    u0, p0, s0, c0 = ex.at(t)
    u = bdm_interpolate(sysm.V, u0)
    p = l2_project(sysm.Q, p0)
    p.coeffs -= (sysm.m @ p.coeffs) / sysm.m.sum() * _unit_coeffs(sysm)
    s = lagrange_interpolate(sysm.S, s0)
    c = lagrange_interpolate(sysm.S, c0)
    return sysm.join(u.coeffs, p.coeffs, s.coeffs, c.coeffs)


def _unit_coeffs(sysm):
    """Coefficients of the constant 1 in the pressure space."""
    return l2_project(sysm.Q, lambda x, y: 1.0 + 0 * x).coeffs


def _initial(spec, sysm):
    if spec.initial is not None:
        return spec.initial(spec, sysm)
    if spec.exact is not None and not spec.steady:
        return _exact_initial(spec, sysm, 0.0)
    return np.zeros(sysm.N)


def fields_of(sysm, U):
    u, p, s, c, _ = sysm.split(U)
    return (DiscreteField(sysm.V, u.copy()), DiscreteField(sysm.Q, p.copy()),
            DiscreteField(sysm.S, s.copy()), DiscreteField(sysm.S, c.copy()))


def transfer_state(sysm_old, U, sysm_new):
    """Move a state vector to a refined mesh."""
    if U is None:
        return None
    f = fields_of(sysm_old, U)
    new = [transfer_field(f[0], sysm_new.V), transfer_field(f[1], sysm_new.Q),
           transfer_field(f[2], sysm_new.S), transfer_field(f[3], sysm_new.S)]
    lam = sysm_old.split(U)[4]
    return sysm_new.join(*(g.coeffs for g in new), lam=float(np.ravel(lam)[0]) if np.size(lam) else 0.0)


def _check_div(u, where):
    d = divergence_sup(u)
    if d >= DIV_TOL:
        log.warning("%s: max |div u_h| = %.3e", where, d)
    return d


def _steps(spec, h):
    if spec.dt is not None:
        dt = spec.dt
    elif spec.dt_rule is not None:
        dt = spec.dt_rule(h)
    else:
        raise ValueError(f"{spec.name}: no time step given")
    n = max(1, int(round(spec.t_end / dt)))
    return n, spec.t_end / n


def _solve_context(fn, what):
    try:
        return fn()
    except NewtonDivergence as exc:
        raise ExperimentError(f"{what}: {exc}") from exc


def _mkdir(out):
    if out:
        os.makedirs(out, exist_ok=True)
    return out


# -- drivers ---------------------------------------------------------------------------
def run_convergence(spec, levels=None, out=None, callback=None):
    """Uniform refinement study with space-time discrete errors."""
    levels = spec.levels if levels is None else levels
    rec = RunRecord(mode="h", meta={"problem": spec.name, "k": spec.k})
    if levels <= 0:
        return rec
    oracle_gate(spec)
    for lev in range(levels):
        mesh = spec.mesh_builder(lev)
        sysm = CoupledSystem(mesh, spec.k, spec.params, spec.bc)
        h = float(mesh.diameters.max())
        if spec.steady:
            U, info = _solve_context(lambda: solve_steady(sysm, spec.sources, None, spec.solver),
                                     f"{spec.name} level {lev}")
            fl = fields_of(sysm, U)
            ns = error_norms(fl, spec.exact, 0.0)
            rec.add(level=lev, h=h, dof=sysm.N, dt=None, e_u=ns.e_u, e_p=ns.e_p, e_s=ns.e_s, e_c=ns.e_c,
                    div_sup=ns.div_sup, newton_iters=info.iterations)
        else:
            nsteps, dt = _steps(spec, h)
            state = StepState(sysm, 0.0, dt, _initial(spec, sysm), None, spec.scheme,
                          startup_substeps=spec.startup_substeps)
            acc = np.zeros(4)
            dmax = 0.0
            for n in range(nsteps):
                state, info = _solve_context(lambda: advance(state, spec.sources, spec.solver),
                                             f"{spec.name} level {lev} step {n + 1}")
                fl = state.fields()
                ns = error_norms(fl, spec.exact, state.t)
                acc += dt * np.array([ns.e_u, ns.e_p, ns.e_s, ns.e_c]) ** 2
                dmax = max(dmax, _check_div(fl[0], f"level {lev} step {n + 1}"))
            e = np.sqrt(acc)
            rec.add(level=lev, h=h, dof=sysm.N, dt=dt, e_u=e[0], e_p=e[1], e_s=e[2], e_c=e[3],
                    div_sup=dmax, newton_iters=float(np.mean(state.history)))
        rec.meta["snapshot"] = (mesh, fields_of(sysm, state.U if not spec.steady else U))
        log.info("%s level %d: dof=%d e_u=%.3e", spec.name, lev, sysm.N, rec.rows[-1]["e_u"])
        if callback:
            callback(rec.rows[-1])
    return rec.compute_rates()


def run_adaptive(spec, levels=None, gamma=None, uniform=None, out=None, callback=None):
    """Steady solve / estimate / mark / refine loop."""
    levels = spec.levels if levels is None else levels
    gamma = spec.gamma if gamma is None else gamma
    uniform = (spec.refinement == "uniform") if uniform is None else uniform
    rec = RunRecord(mode="h" if uniform else "dof",
                    meta={"problem": spec.name, "k": spec.k, "refinement": "uniform" if uniform else "adaptive"})
    if levels <= 0:
        return rec
    oracle_gate(spec)
    _mkdir(out)
    mesh = spec.mesh_builder(0)
    for lev in range(levels):
        sysm = CoupledSystem(mesh, spec.k, spec.params, spec.bc)
        U, info = _solve_context(lambda: solve_steady(sysm, spec.sources, None, spec.solver),
                                 f"{spec.name} level {lev}")
        fl = fields_of(sysm, U)
        ns = error_norms(fl, spec.exact, 0.0)
        _check_div(fl[0], f"level {lev}")
        ind = steady_indicators(fl, spec.params, spec.sources, 0.0, spec.bc)
        psi = ind.psi
        rec.add(level=lev, h=float(mesh.diameters.max()), dof=sysm.N, dt=None, e_u=ns.e_u, e_p=ns.e_p,
                e_s=ns.e_s, e_c=ns.e_c, div_sup=ns.div_sup, psi=psi, eff=effectivity(ns.total(), psi),
                newton_iters=info.iterations)
        rec.meta["snapshot"] = (mesh, fl, ind)
        log.info("%s level %d: dof=%d e_u=%.3e psi=%.3e", spec.name, lev, sysm.N, ns.e_u, psi)
        if out:
            ind.write_csv(os.path.join(out, f"indicators_level{lev}.csv"))
            M.dump_mesh(mesh, os.path.join(out, f"mesh_level{lev}.txt"))
        if callback:
            callback(rec.rows[-1])
        if lev + 1 < levels:
            mesh = M.refine_uniform(mesh) if uniform else M.refine_marked_sweeps(mesh, dorfler_mark(ind, gamma))
    return rec.compute_rates()


def run_transient_estimator(spec, levels=None, out=None, callback=None):
    """Uniform levels; accumulates the space-time estimator and errors per level."""
    levels = spec.levels if levels is None else levels
    rec = RunRecord(mode="h", meta={"problem": spec.name, "k": spec.k})
    if levels <= 0:
        return rec
    oracle_gate(spec)
    _mkdir(out)
    for lev in range(levels):
        mesh = spec.mesh_builder(lev)
        sysm = CoupledSystem(mesh, spec.k, spec.params, spec.bc)
        nsteps, dt = _steps(spec, float(mesh.diameters.max()))
        state = StepState(sysm, 0.0, dt, _initial(spec, sysm), None, spec.scheme,
                          startup_substeps=spec.startup_substeps)
        acc = np.zeros(4)
        steps = []
        dmax = 0.0
        for n in range(nsteps):
            old = state
            state, info = _solve_context(lambda: advance(state, spec.sources, spec.solver),
                                         f"{spec.name} level {lev} step {n + 1}")
            new_f, old_f = state.fields(), old.fields()
            ns = error_norms(new_f, spec.exact, state.t)
            acc += dt * np.array([ns.e_u, ns.e_p, ns.e_s, ns.e_c]) ** 2
            dmax = max(dmax, _check_div(new_f[0], f"level {lev} step {n + 1}"))
            a, b = step_indicators(new_f, old_f, dt, spec.params, spec.sources, state.t, old.t, spec.bc)
            ti = time_indicator((new_f[0], new_f[2], new_f[3]), (old_f[0], old_f[2], old_f[3]), dt)
            steps.append({"dt": dt, "new": a, "old": b, "time": ti})
        ups = accumulate_upsilon(steps)
        e = np.sqrt(acc)
        total = float(np.sqrt(acc.sum()))
        rec.add(level=lev, h=float(mesh.diameters.max()), dof=sysm.N, dt=dt, e_u=e[0], e_p=e[1], e_s=e[2],
                e_c=e[3], div_sup=dmax, psi=ups.upsilon, eff=effectivity(total, ups.upsilon),
                newton_iters=float(np.mean(state.history)))
        rec.rows[-1]["xi"] = ups.xi
        rec.meta["snapshot"] = (mesh, state.fields(), steps[-1]["new"])
        if out:
            steps[-1]["new"].write_csv(os.path.join(out, f"indicators_level{lev}.csv"))
        log.info("%s level %d: dof=%d upsilon=%.3e eff=%.3f", spec.name, lev, sysm.N, ups.upsilon,
                 rec.rows[-1]["eff"])
        if callback:
            callback(rec.rows[-1])
    return rec.compute_rates()


def _budget_marks(ind, marks, nt, nt_max):
    """Keep the largest marked indicators so that refinement stays near ``nt_max`` elements.

    Each bisection with its closure adds roughly two elements per mark.
    """
    marks = np.asarray(marks)
    if marks.dtype == bool:
        marks = np.flatnonzero(marks)
    if nt_max is None:
        return marks
    room = max(0, (nt_max - nt) // 2)
    if marks.size <= room:
        return marks
    psi = ind.psi_K[marks]
    return np.sort(marks[np.argsort(-psi, kind="stable")[:room]])


def run_demo(spec, steps=None, out=None, callback=None, vtk_every=0):
    """Time loop without exact solution; optional adaptive pass after every step."""
    from .vtk import write_vtk

    _mkdir(out)
    mesh = spec.mesh_builder(0)
    sysm = CoupledSystem(mesh, spec.k, spec.params, spec.bc)
    nsteps, dt = _steps(spec, float(mesh.diameters.max())) if steps is None else (steps, spec.dt)
    rec = RunRecord(mode="h", meta={"problem": spec.name, "k": spec.k, "seed": spec.seed})
    if nsteps <= 0:
        return rec
    U0 = _initial(spec, sysm)
    f0 = fields_of(sysm, U0)
    s0, c0 = f0[2].coeffs, f0[3].coeffs
    if spec.bounds is None:
        hi = 1.1 * max(float(s0.max()), float(c0.max()))
        lo = min(-0.1, 1.1 * min(float(s0.min()), float(c0.min())))
        bounds = (lo, hi)
    else:
        bounds = spec.bounds
    rec.meta["bounds"] = bounds
    state = StepState(sysm, 0.0, dt, U0, None, spec.scheme,
                          startup_substeps=spec.startup_substeps)
    ext = []
    nt_max = None if spec.element_budget is None else int(spec.element_budget * mesh.nt)
    for n in range(nsteps):
        old = state
        state, info = _solve_context(lambda: advance(state, None, spec.solver),
                                     f"{spec.name} step {n + 1}")
        fl = state.fields()
        d = _check_div(fl[0], f"step {n + 1}")
        s, c = fl[2].coeffs, fl[3].coeffs
        ext.append((float(s.min()), float(s.max()), float(c.min()), float(c.max())))
        row = dict(level=n + 1, h=float(mesh.diameters.max()), dof=sysm.N, dt=dt, div_sup=d,
                   newton_iters=info.iterations)
        if spec.adapt_each_step:
            a, b = step_indicators(fl, old.fields(), dt, spec.params, None, state.t, old.t, spec.bc)
            ups = math.sqrt(dt * (float(a.total.sum()) + float(b.total.sum())))
            row["psi"] = ups
            if n + 1 < nsteps:
                marks = _budget_marks(a, dorfler_mark(a, spec.gamma), mesh.nt, nt_max)
                if marks.size:
                    mesh = M.refine_marked(mesh, marks)
                new_sys = CoupledSystem(mesh, spec.k, spec.params, spec.bc)
                state = replace(state, system=new_sys, U=transfer_state(sysm, state.U, new_sys),
                                U_prev=transfer_state(sysm, state.U_prev, new_sys))
                sysm = new_sys
        rec.add(**row)
        if out and vtk_every and (n + 1) % vtk_every == 0:
            f = state.fields()
            write_vtk(sysm.mesh, {"u": f[0], "p": f[1], "s": f[2], "c": f[3]},
                      os.path.join(out, f"{spec.name}_step{n + 1:04d}.vtk"))
        if callback:
            callback(row)
        log.info("%s step %d: t=%.4g dof=%d div=%.2e", spec.name, n + 1, state.t, sysm.N, d)
    rec.meta["extrema"] = ext
    f = state.fields()
    rec.meta["snapshot"] = (sysm.mesh, f)
    if out:
        path = os.path.join(out, f"{spec.name}_final.vtk")
        write_vtk(sysm.mesh, {"u": f[0], "p": f[1], "s": f[2], "c": f[3]}, path)
        rec.meta["vtk"] = path
    return rec


DRIVERS = {"convergence": run_convergence, "adaptive": run_adaptive,
           "transient-estimator": run_transient_estimator, "demo": run_demo}


def run_experiment(spec, driver=None, out=None, **kw):
    """Run the driver registered for ``spec`` (or ``driver``) and return its RunRecord."""
    name = driver or spec.driver
    try:
        fn = DRIVERS[name]
    except KeyError:
        raise ValueError(f"unknown driver {name!r}") from None
    return fn(spec, out=out, **kw)

"""Backward Euler / BDF2 stepping with Newton or Picard inner solves."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .assembly import StepData
from .fem import DiscreteField
from .linalg import lu_solve

log = logging.getLogger(__name__)

BE = "BE"
BDF2 = "BDF2"
STEADY = "STEADY"
DIFFERENCE_WEIGHTS = (3.0, -4.0, 1.0)


class NewtonDivergence(RuntimeError):
    def __init__(self, msg, residual=np.nan, iterations=0):
        super().__init__(msg)
        self.residual = residual
        self.iterations = iterations


def apply_difference(y_np1, y_n, y_nm1):
    """BDF2 difference 3 y^{n+1} - 4 y^n + y^{n-1}."""
    a, b, c = (np.asarray(v, dtype=float) for v in (y_np1, y_n, y_nm1))
    if not (a.shape == b.shape == c.shape):
        raise ValueError(f"length mismatch: {a.shape}, {b.shape}, {c.shape}")
    w0, w1, w2 = DIFFERENCE_WEIGHTS
    return w0 * a + w1 * b + w2 * c


@dataclass
class Sources:
    """Analytic sources f_u(x, y, t), f1(x, y, t), f2(x, y, t); None means zero."""

    f_u: Optional[Callable] = None
    f1: Optional[Callable] = None
    f2: Optional[Callable] = None


@dataclass
class StepState:
    """State at level n (and n-1 for BDF2) on one mesh."""

    system: object
    t: float
    dt: float
    U: np.ndarray
    U_prev: Optional[np.ndarray] = None
    scheme: str = BDF2
    history: list = field(default_factory=list)
    startup_substeps: object = 1        # BE sub-steps for the first BDF2 step; "auto" = ceil(1/dt)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.scheme not in (BE, BDF2):
            raise ValueError(f"unknown scheme {self.scheme!r}")

    def fields(self, U=None):
        sysm = self.system
        u, p, s, c, _ = sysm.split(self.U if U is None else U)
        return (DiscreteField(sysm.V, u.copy()), DiscreteField(sysm.Q, p.copy()),
                DiscreteField(sysm.S, s.copy()), DiscreteField(sysm.S, c.copy()))


@dataclass
class SolveInfo:
    iterations: int
    residuals: list
    converged: bool = True


def newton_solve(system, U0, data, rtol=1e-6, atol=1e-12, maxit=25):
    """Plain Newton with one halving retry when the residual grows."""
    U = np.array(U0, dtype=float)
    sysm = system.assemble(U, data)
    r0 = np.linalg.norm(sysm.rhs)
    res = [r0]
    r = r0
    tol = max(rtol * r0, atol)
    for it in range(1, maxit + 1):
        delta = lu_solve(sysm.matrix, sysm.rhs)
        Un = U + delta
        sn = system.assemble(Un, data)
        rn = np.linalg.norm(sn.rhs)
        if not np.isfinite(rn) or rn > r:
            Uh = U + 0.5 * delta
            sh = system.assemble(Uh, data)
            rh = np.linalg.norm(sh.rhs)
            if np.isfinite(rh) and (rh < rn or not np.isfinite(rn)):
                Un, sn, rn = Uh, sh, rh
        if not np.isfinite(rn):
            raise NewtonDivergence(f"non-finite residual at iteration {it}", rn, it)
        U, sysm, r = Un, sn, rn
        res.append(r)
        log.debug("newton %d: |R| = %.3e", it, r)
        if r <= tol:
            return U, SolveInfo(it, res)
    raise NewtonDivergence(f"Newton did not converge in {maxit} iterations (|R| = {r:.3e})", r, maxit)


def _block_indices(system, names):
    o = system.offsets
    pos = {"u": (o[0], o[1]), "p": (o[1], o[2]), "s": (o[2], o[3]), "c": (o[3], o[4]), "lam": (o[4], o[5])}
    return np.concatenate([np.arange(*pos[n]) for n in names])


def picard_solve(system, U0, data, tol=1e-8, maxit=50):
    """Alternate an Oseen solve for (u, p) and a transport solve for (s, c)."""
    U = np.array(U0, dtype=float)
    flow = _block_indices(system, ("u", "p", "lam"))
    transport = _block_indices(system, ("s", "c"))
    diffs = []
    for it in range(1, maxit + 1):
        U_old = U.copy()
        for idx in (flow, transport):
            sysm = system.assemble(U, data, lin=U)
            J = sysm.matrix[idx][:, idx]
            U[idx] += lu_solve(J, sysm.rhs[idx])
        d = np.linalg.norm(U - U_old)
        diffs.append(d)
        if not np.isfinite(d):
            raise NewtonDivergence(f"fixed-point iteration produced non-finite values at {it}", d, it)
        if d <= tol * max(np.linalg.norm(U), 1e-300):
            return U, SolveInfo(it, diffs)
    raise NewtonDivergence(f"fixed-point iteration did not converge in {maxit} iterations", diffs[-1], maxit)


def step_data(system, state_U, U_prev, dt, scheme, t_new, sources=None):
    """Time weights, history vector, loads and boundary data at ``t_new``."""
    sources = sources or Sources()
    if scheme == STEADY:
        wt, hist = 0.0, np.zeros(system.N)
    elif scheme == BDF2:
        wt = 1.5 / dt
        hist = system.mass_apply(4.0 * state_U - U_prev) / (2.0 * dt)
    else:
        wt = 1.0 / dt
        hist = system.mass_apply(state_U) / dt
    load = system.source_load(sources.f_u, sources.f1, sources.f2, t_new)
    g, dv = system.boundary_data(t_new)
    return StepData(t_new, wt, hist, load, g, dv)


def _substeps(state):
    m = state.startup_substeps
    if m == "auto":
        return max(1, int(np.ceil(1.0 / state.dt - 1e-12)))
    return max(1, int(m))


def advance(state, sources=None, solver="newton", **kw):
    """One step to t + dt; BDF2 once two levels exist, backward Euler otherwise.

    The backward Euler start of a BDF2 run may be split into sub-steps
    (``startup_substeps``) so that its O(dt^2) error does not dominate.
    """
    if state.scheme == BDF2 and state.U_prev is None and _substeps(state) > 1:
        m = _substeps(state)
        sub = replace(state, dt=state.dt / m, scheme=BE, startup_substeps=1)
        its = 0
        for _ in range(m):
            sub, info = advance(sub, sources, solver, **kw)
            its += info.iterations
        info = SolveInfo(its, info.residuals, info.converged)
        new = replace(state, t=state.t + state.dt, U=sub.U, U_prev=state.U.copy(),
                      history=state.history + [its])
        return new, info
    scheme = BDF2 if (state.scheme == BDF2 and state.U_prev is not None) else BE
    t_new = state.t + state.dt
    data = step_data(state.system, state.U, state.U_prev, state.dt, scheme, t_new, sources)
    solve = newton_solve if solver == "newton" else picard_solve
    try:
        U, info = solve(state.system, state.U, data, **kw)
    except NewtonDivergence as exc:
        raise NewtonDivergence(f"step to t={t_new:.6g}: {exc}", exc.residual, exc.iterations) from exc
    new = replace(state, t=t_new, U=U, U_prev=state.U.copy(), history=state.history + [info.iterations])
    return new, info


def picard_advance(state, sources=None, **kw):
    return advance(state, sources, solver="picard", **kw)


def solve_steady(system, sources=None, U0=None, solver="newton", **kw):
    """Stationary problem (no time derivative)."""
    U0 = np.zeros(system.N) if U0 is None else U0
    data = step_data(system, U0, None, 1.0, STEADY, 0.0, sources)
    solve = newton_solve if solver == "newton" else picard_solve
    return solve(system, U0, data, **kw)

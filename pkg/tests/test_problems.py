from dataclasses import replace

import numpy as np
import pytest

from divflow.assembly import CoupledSystem, PhysicalParams, Viscosity
from divflow.mesh import build_rectangle_mesh
from divflow.problems import (PROBLEMS, _budget_marks, ExactSolution, ExperimentError, X, Y, get_problem, lattice_field,
                              manufactured_forcing, oracle_gate, run_adaptive, run_convergence,
                              run_experiment, run_transient_estimator, strong_residual_fd, zero_solution)
from divflow.timestepping import Sources


def test_zero_solution_zero_forcing():
    src = manufactured_forcing(zero_solution(), PhysicalParams(drag=2.0))
    x = np.linspace(0.1, 0.9, 5)
    assert np.all(np.asarray(src.f_u(x, x, 0.3)) == 0)
    assert np.all(np.asarray(src.f1(x, x, 0.3)) == 0) and np.all(np.asarray(src.f2(x, x, 0.3)) == 0)


def test_forcing_hand_oracle():
    # u = (y, 0), p = x, s = x, c = y with constant viscosity:
    # f_u = (1/rho_m, alpha x + beta y), f_1 = y, f_2 = -v_p
    prm = PhysicalParams(viscosity=Viscosity.const(3.0), rho_m=2.0, gravity=(0.0, -1.0), alpha=0.3,
                         beta=0.7, v_p=0.4)
    src = manufactured_forcing(ExactSolution((Y, 0), X, X, Y), prm)
    x, y = 0.2, 0.9
    fu = np.asarray(src.f_u(x, y, 0.0), dtype=float)
    assert np.allclose(fu, [0.5, 0.3 * x + 0.7 * y], atol=1e-15)
    assert src.f1(x, y, 0.0) == pytest.approx(y)
    assert src.f2(x, y, 0.0) == pytest.approx(-0.4)


def test_fd_oracle_example1_midpoint():
    spec = get_problem("example1")
    r = strong_residual_fd(spec.exact, spec.sources, spec.params, 0.5, 0.5, 1.0)
    assert np.abs(r).max() < 1e-6


@pytest.mark.parametrize("name", ["example1", "example2", "example3"])
def test_oracle_gate_passes(name):
    assert oracle_gate(get_problem(name)) < 1e-6


def test_oracle_gate_catches_wrong_forcing():
    spec = get_problem("example1")
    bad = replace(spec, sources=Sources(lambda x, y, t: (0 * x, 0 * x), lambda x, y, t: 0 * x,
                                        lambda x, y, t: 0 * x))
    with pytest.raises(ExperimentError):
        oracle_gate(bad)


def test_registry_and_overrides():
    assert set(PROBLEMS) == {f"example{i}" for i in range(1, 6)}
    with pytest.raises(ValueError):
        get_problem("example9")
    with pytest.raises(ValueError):
        get_problem("example1", colour="red")
    spec = get_problem("example2", a0=7.0, levels=3)
    assert spec.params.a0 == 7.0 and spec.levels == 3
    assert oracle_gate(spec) < 1e-6


@pytest.mark.parametrize("runner,name", [(run_convergence, "example1"), (run_adaptive, "example2"),
                                         (run_transient_estimator, "example3")])
def test_zero_levels_empty_record(runner, name):
    assert len(runner(get_problem(name), levels=0)) == 0


def test_run_convergence_coarse():
    rec = run_convergence(get_problem("example1", levels=1))
    row = rec.rows[0]
    assert row["dof"] == 147 and row["dt"] == pytest.approx(1.0)
    assert row["div_sup"] < 1e-9
    assert row["rate_u"] is None


def test_run_experiment_dispatch(tmp_path):
    spec = get_problem("example3", levels=1)
    rec = run_experiment(spec, out=str(tmp_path))
    assert len(rec) == 1 and rec.rows[0]["psi"] > 0
    assert (tmp_path / "indicators_level0.csv").exists()
    with pytest.raises(ValueError):
        run_experiment(spec, driver="sweep")


def _example5_initial(seed):
    spec = get_problem("example5", seed=seed)
    sysm = CoupledSystem(build_rectangle_mesh(2000.0, 1000.0, 6, 3), spec.k, spec.params, spec.bc)
    return spec.initial(spec, sysm), sysm


def test_seed_determinism():
    a, sysm = _example5_initial(3)
    b, _ = _example5_initial(3)
    c, _ = _example5_initial(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    s = sysm.split(a)[2]
    assert s.min() >= 0.0 and s.max() <= 1.0


def test_lattice_field_piecewise_constant():
    f = lattice_field(np.random.default_rng(0), ((0, 2), (0, 1)), (4, 2))
    x = np.array([0.1, 0.4, 1.9, 1.99])
    y = np.array([0.1, 0.2, 0.9, 0.99])
    v = f(x, y)
    assert v[0] == v[1] and v[2] == v[3]
    assert np.all((v >= 0) & (v <= 1))


class _Ind:
    def __init__(self, psi):
        self.psi_K = np.asarray(psi, dtype=float)


def test_budget_marks_keeps_largest():
    ind = _Ind([0.1, 5.0, 3.0, 4.0, 0.2])
    marks = np.array([False, True, True, True, False])
    assert np.array_equal(_budget_marks(ind, marks, 10, None), [1, 2, 3])
    assert np.array_equal(_budget_marks(ind, marks, 10, 100), [1, 2, 3])
    # room for (14 - 10) // 2 = 2 marks: the two largest, in index order
    assert np.array_equal(_budget_marks(ind, marks, 10, 14), [1, 3])
    assert _budget_marks(ind, marks, 10, 10).size == 0


def test_example5_budget_default():
    assert get_problem("example5").element_budget == 2.0
    assert get_problem("example4").element_budget is None

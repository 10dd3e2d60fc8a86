"""Acceptance criteria on the reference experiments.

Each criterion prints one PASS/FAIL line (also collected in the terminal
summary). Reference-value checks against tabulated results are reported the
same way. Run alone with ``pytest tests/test_acceptance.py -v -s`` or
``python tests/test_acceptance.py``.
"""
import math
import os
import sys
import time

import numpy as np
import pytest

from divflow.problems import get_problem, run_adaptive, run_convergence, run_demo, run_transient_estimator
from divflow.selftest import run_selftest
from divflow.vtk import read_vtk

pytestmark = pytest.mark.slow

ACCEPTANCE_LINES = []


def report(tag, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {tag}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


def timed(fn, *a, **kw):
    t0 = time.perf_counter()
    rec = fn(*a, **kw)
    return rec, time.perf_counter() - t0


@pytest.fixture(scope="module")
def example1():
    # initial mesh 1/h = sqrt(2) plus four refinements
    return timed(run_convergence, get_problem("example1", levels=5))


@pytest.fixture(scope="module")
def example2_adaptive():
    return timed(run_adaptive, get_problem("example2"), levels=7, gamma=1e-4, uniform=False)


@pytest.fixture(scope="module")
def example2_uniform():
    return timed(run_adaptive, get_problem("example2"), levels=5, uniform=True)


@pytest.fixture(scope="module")
def example3():
    return timed(run_transient_estimator, get_problem("example3", levels=6))


@pytest.fixture(scope="module")
def demos(tmp_path_factory):
    out = tmp_path_factory.mktemp("demos")
    t0 = time.perf_counter()
    r4 = run_demo(get_problem("example4"), out=str(out / "ex4"))
    r5 = run_demo(get_problem("example5", seed=0), steps=10, out=str(out / "ex5"))
    return (r4, r5), time.perf_counter() - t0


def _fmt(xs):
    return "[" + ", ".join(f"{x:.3f}" for x in xs) + "]"


def test_criterion_1_convergence(example1):
    rec, secs = example1
    rows = rec.rows[-2:]
    rates = [r[f"rate_{n}"] for r in rows for n in ("u", "p", "s", "c")]
    div = max(r["div_sup"] for r in rec.rows)
    ok = all(1.75 <= x <= 2.25 for x in rates) and div < 1e-9 and secs < 900
    assert report("criterion 1 (Example 1 convergence)", ok,
                  f"rates u,p,s,c at two finest levels {_fmt(rates)}, max div {div:.2e}, {secs:.0f} s")


def test_criterion_3_adaptive(example2_uniform, example2_adaptive):
    uni, t_uni = example2_uniform
    ada, t_ada = example2_adaptive
    uni_rates = [r["rate_u"] for r in uni.rows[1:]]
    ada_rates = [r[f"rate_{n}"] for r in ada.rows[-2:] for n in ("u", "p", "s", "c")]
    eff = [r["eff"] for r in ada.rows]
    spread = max(eff) - min(eff)
    secs = t_uni + t_ada
    ok_uni = min(uni_rates) < 1.0
    ok_ada = all(x >= 0.9 for x in ada_rates)
    ok = ok_uni and ok_ada and spread < 0.1 and secs < 1200
    assert report("criterion 3 (Example 2 adaptivity)", ok,
                  f"uniform e_u rates {_fmt(uni_rates)}; adaptive rates u,p,s,c at two finest levels "
                  f"{_fmt(ada_rates)}; eff {_fmt(eff)} spread {spread:.3f}; {secs:.0f} s")


def test_criterion_4_transient_estimator(example3):
    rec, secs = example3
    last = rec.rows[-1]
    rates = [last[f"rate_{n}"] for n in ("p", "s", "c")]
    eff = [r["eff"] for r in rec.rows]
    ratio = max(eff) / min(eff)
    ok = (all(0.9 <= x <= 1.1 for x in rates) and ratio < 1.3 and 0.03 <= min(eff) and max(eff) <= 0.3
          and secs < 1800)
    assert report("criterion 4 (Example 3 transient estimator)", ok,
                  f"finest rates p,s,c {_fmt(rates)}; eff {_fmt(eff)} max/min {ratio:.3f}; {secs:.0f} s")


def test_criterion_5_selftest():
    t0 = time.perf_counter()
    lines = []
    results = run_selftest(lines.append)
    secs = time.perf_counter() - t0
    failed = [r.name for r in results if not r.passed]
    ok = not failed and secs < 300
    assert report("criterion 5 (property suite)", ok,
                  f"{len(results) - len(failed)}/{len(results)} checks passed"
                  + (f" (failed: {', '.join(failed)})" if failed else "") + f"; {secs:.0f} s")


def test_criterion_6_demos(demos):
    (r4, r5), secs = demos
    details = []
    ok = secs < 1800
    for rec, steps in ((r4, 60), (r5, 10)):
        lo, hi = rec.meta["bounds"]
        ext = np.array(rec.meta["extrema"])
        bounded = bool(np.all(np.isfinite(ext)) and ext[:, [0, 2]].min() >= lo and ext[:, [1, 3]].max() <= hi)
        vtk = read_vtk(rec.meta["vtk"])
        mesh = rec.meta["snapshot"][0]
        parsed = (vtk["points"].shape == (mesh.nv, 3) and vtk["cells"].shape == (mesh.nt, 3)
                  and all(np.all(np.isfinite(a)) for d in ("point_data", "cell_data") for a in vtk[d].values())
                  and {"u", "s", "c"} <= set(vtk["point_data"]) and "p" in vtk["cell_data"])
        done = len(rec) == steps
        ok &= bounded and parsed and done
        details.append(f"{rec.meta['problem']} {steps} steps done={done} "
                       f"s,c in [{ext[:, [0, 2]].min():.3g}, {ext[:, [1, 3]].max():.3g}] bounded={bounded} "
                       f"vtk={parsed}")
    assert report("criterion 6 (demos)", ok, "; ".join(details) + f"; {secs:.0f} s")


def test_criterion_2_divergence(example1, example2_adaptive, example2_uniform, example3, demos):
    runs = {"Example 1": example1[0], "Example 2 adaptive": example2_adaptive[0],
            "Example 2 uniform": example2_uniform[0], "Example 3": example3[0],
            "Example 4": demos[0][0], "Example 5": demos[0][1]}
    worst = {k: max(r["div_sup"] for r in rec.rows) for k, rec in runs.items()}
    ok = max(worst.values()) < 1e-9
    assert report("criterion 2 (divergence-free)", ok,
                  ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# -- reference values ------------------------------------------------------------------
def test_reference_example1_row(example1):
    # row 1/h = 8 sqrt(2): e_u 0.0456, e_p 0.1695, e_s 0.00080, e_c 0.00046, each within 25 %
    row = example1[0].rows[3]
    ref = {"e_u": 0.0456, "e_p": 0.1695, "e_s": 0.00080, "e_c": 0.00046}
    dev = {k: row[k] / v - 1 for k, v in ref.items()}
    ok = all(abs(d) <= 0.25 for d in dev.values())
    assert report("reference (Example 1 row 1/h=8*sqrt(2))", ok,
                  ", ".join(f"{k} {row[k]:.4g} ({100 * d:+.0f}%)" for k, d in dev.items()))


def test_reference_example2_effectivity(example2_uniform, example2_adaptive):
    e0 = example2_uniform[0].rows[0]["eff"]
    ada = [r["eff"] for r in example2_adaptive[0].rows[3:]]
    ok = abs(e0 - 0.329) <= 0.1 and all(0.2 <= e <= 0.35 for e in ada) and max(ada) - min(ada) < 0.05
    assert report("reference (Example 2 effectivity)", ok,
                  f"uniform level 0 {e0:.3f} (0.329 +- 0.1); adaptive levels 3+ {_fmt(ada)} "
                  f"(within [0.2, 0.35], spread < 0.05)")


def test_reference_example3_effectivity(example3):
    e0 = example3[0].rows[0]["eff"]
    assert report("reference (Example 3 coarsest effectivity)", abs(e0 - 0.0859) <= 0.03,
                  f"{e0:.4f} (0.0859 +- 0.03)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))

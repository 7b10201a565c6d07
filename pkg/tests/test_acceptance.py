"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` (the lines are repeated in the
terminal summary) or ``python3 tests/test_acceptance.py`` for the lines alone.
Tolerances are fixed constants below and are never tuned to the outcome.
"""
from __future__ import annotations

import math
import sys
import time
from functools import lru_cache

import numpy as np
import pytest

from nlbalance.harness import convergence_study, coupling_consistency
from nlbalance.lattice import (Lattice, build_lattice, check_qs, extended_matrix, fixed_builder, project_initial,
                               random_lattice_weights, to_measure, upwind_matrix)
from nlbalance.measures import DiscreteMeasure, prw_augmented, prw_direct
from nlbalance.ode import integrate, min_steps
from nlbalance.problem import SCENARIOS, BalanceProblem, Box, choose_R, closed_form_mass, mass_bound, scenario
from nlbalance.stochastic import simulate_chain
from nlbalance.superposition import bump, flow_distance, picard_solve, plateau, weak_residual

RESULTS: list[str] = []


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _random_measure(rng, d, max_atoms=8):
    n = int(rng.integers(0, max_atoms + 1))
    return DiscreteMeasure(rng.normal(size=(n, d)) * 2.0, rng.uniform(0.0, 2.0, n))


def _zero_f(t, X, m):
    return np.zeros_like(np.asarray(X, float))


def _zero_g(t, X, m):
    return np.zeros(len(X))


def _two_state():
    problem = BalanceProblem("two_state", 1.0, DiscreteMeasure.dirac([0.0]), Box([0.0], [1.0]), _zero_f, _zero_g,
                             0.0, 0.0, 0.0, 0.0, depends_on_measure=False)
    return problem, Lattice([[0.0], [1.0]]), fixed_builder(np.array([[-1.0, 1.0], [0.0, 0.0]]))


# -- 1 -------------------------------------------------------------------------

def test_criterion_01_prw_equivalence():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst_eq = worst_inv = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 4))
        m1, m2 = _random_measure(rng, d), _random_measure(rng, d)
        b = float(rng.uniform(0.2, 4.0))
        M = max(m1.mass, m2.mass, 1e-3)
        direct = prw_direct(m1, m2, b)
        aug = [prw_augmented(m1, m2, b, R) for R in (1.01 * M, 2.0 * M, 10.0 * M)]
        worst_eq = max(worst_eq, max(abs(direct - a) for a in aug))
        worst_inv = max(worst_inv, max(aug) - min(aug))
    elapsed = time.perf_counter() - t0
    ok = worst_eq <= 1e-8 and worst_inv <= 1e-9 and elapsed < 30
    record(1, "PRW equivalence", ok,
           f"max |direct-augmented| = {worst_eq:.2e} (<= 1e-8), R spread = {worst_inv:.2e} (<= 1e-9), "
           f"{elapsed:.1f} s (< 30 s)")


# -- 2 -------------------------------------------------------------------------

def test_criterion_02_metric_axioms():
    rng = np.random.default_rng(202)
    sym = tri = ident = 0.0
    separation_failures = 0
    for _ in range(500):
        d = int(rng.integers(1, 4))
        x, y, z = (_random_measure(rng, d) for _ in range(3))
        b = float(rng.uniform(0.2, 4.0))
        dxy, dyx = prw_direct(x, y, b), prw_direct(y, x, b)
        sym = max(sym, abs(dxy - dyx))
        tri = max(tri, prw_direct(x, z, b) - dxy - prw_direct(y, z, b))
        ident = max(ident, prw_direct(x, x, b))
        if not x == y and dxy <= 1e-8:
            separation_failures += 1
    ok = sym <= 1e-8 and tri <= 1e-8 and ident <= 1e-8 and separation_failures == 0
    record(2, "metric axioms", ok,
           f"symmetry {sym:.1e}, triangle excess {tri:.1e}, d(x,x) {ident:.1e}, "
           f"zero distance between distinct measures {separation_failures}x")


# -- 3 -------------------------------------------------------------------------

def test_criterion_03_lattice_metric_sandwich():
    rng = np.random.default_rng(303)
    lower_viol = upper_viol = 0
    worst_ratio = 0.0
    for _ in range(500):
        d = int(rng.integers(1, 3))
        h = float(rng.choice([0.25, 0.5]))
        L = build_lattice(Box(np.zeros(d), np.ones(d)), h)
        b = L.diameter * float(rng.uniform(1.0, 2.0))
        b1 = random_lattice_weights(rng, L, 2.0, 6)
        b2 = random_lattice_weights(rng, L, 2.0, 6)
        W = prw_direct(to_measure(b1, L), to_measure(b2, L), b)
        l1 = float(np.abs(b1 - b2).sum())
        lower_viol += W / b > l1 + 1e-8
        upper_viol += l1 > W / L.fineness + 1e-8
        if W > 0:
            worst_ratio = max(worst_ratio, l1 * L.fineness / W)
    ok = lower_viol == 0 and upper_viol == 0
    record(3, "lattice metric sandwich", ok,
           f"lower-bound violations {lower_viol}/500, upper-bound violations {upper_viol}/500, "
           f"max |Δβ|·d(S)/W = {worst_ratio:.3f} (bound requires <= 1)")


# -- 4 -------------------------------------------------------------------------

def test_criterion_04_kolmogorov_invariants():
    rng = np.random.default_rng(404)
    worst_rs = 0.0
    min_off = np.inf
    qs2 = qs3_excess = 0.0
    details = []
    for name in SCENARIOS:
        p = scenario(name)
        h = 0.05
        L = build_lattice(p.domain, h)
        R = choose_R(p)
        for _ in range(500):
            beta = random_lattice_weights(rng, L, mass_bound(p, p.T), 8)
            t = float(rng.uniform(0, p.T))
            for M in (upwind_matrix(p, L, t, beta), extended_matrix(p, L, t, beta, R)):
                c = M.check()
                worst_rs = max(worst_rs, c["max_abs_row_sum"])
                min_off = min(min_off, c["min_offdiagonal"])
        rep = check_qs(p, L, probes=10_000, seed=404)
        qs2 = max(qs2, rep.qs2_max_error)
        bound = p.C_f * math.sqrt(p.dim) * h
        qs3_excess = max(qs3_excess, rep.qs3_max_sum / bound - 1.0 if bound else rep.qs3_max_sum)
        details.append(f"{name}: QS3 {rep.qs3_max_sum:.4g}/{bound:.4g}")
    ok = min_off >= 0 and worst_rs <= 1e-12 and qs2 <= 1e-12 and qs3_excess <= 1e-12
    record(4, "Kolmogorov invariants", ok,
           f"min off-diagonal {min_off:.2g}, max |row sum| {worst_rs:.1e}, QS2 margin {qs2:.1e}, "
           f"{'; '.join(details)}")


# -- 5 -------------------------------------------------------------------------

def test_criterion_05_closed_form_oracles():
    t0 = time.perf_counter()
    checks = []
    pg = scenario("pure_growth")
    exact = closed_form_mass(pg, pg.T)
    L = build_lattice(pg.domain, 0.1)
    beta0 = project_initial(pg.initial, L)
    ode_err = abs(integrate(pg, L, beta0, 200).masses()[-1] - exact)
    sup_err = abs(picard_solve(pg, 100, steps=200).flow.masses()[-1] - exact)
    checks += [ode_err <= 1e-6, sup_err <= 1e-6]
    N = 100_000
    R = choose_R(pg)
    chain = simulate_chain(pg, L, N, 1000, R, seed=0, beta0=beta0)
    p_in = exact / R
    sigma = R * math.sqrt(p_in * (1 - p_in) / N)
    mc_z = (chain.flow.masses()[-1] - exact) / sigma
    checks.append(abs(mc_z) <= 3)
    lg = scenario("logistic_growth")
    lexact = 1.0 / (1.0 + math.exp(-lg.T) * (1.0 / lg.initial.mass - 1.0))
    Ll = build_lattice(lg.domain, 0.1)
    log_ode = abs(integrate(lg, Ll, project_initial(lg.initial, Ll), 200).masses()[-1] - lexact)
    log_sup = abs(picard_solve(lg, 100, steps=200).flow.masses()[-1] - lexact)
    checks += [log_ode <= 1e-4, log_sup <= 1e-4]
    tp, tl, tq = _two_state()
    two_ode = abs(integrate(tp, tl, [1.0, 0.0], 100, movement=tq).states[-1, 0] - math.exp(-1))
    two = simulate_chain(tp, tl, N, 20, 2.0, seed=0, beta0=np.array([1.0, 0.0]), movement=tq)
    n0 = two.counts[0, 0]
    q = math.exp(-1)
    two_z = (two.counts[-1, 0] / n0 - q) / math.sqrt(q * (1 - q) / n0)
    checks += [two_ode <= 1e-8, abs(two_z) <= 3]
    elapsed = time.perf_counter() - t0
    checks.append(elapsed < 120)
    record(5, "closed-form oracles", all(checks),
           f"pure_growth ODE {ode_err:.1e}, particles {sup_err:.1e} (<= 1e-6), MC {mc_z:+.2f} sigma; "
           f"logistic ODE {log_ode:.1e}, particles {log_sup:.1e} (<= 1e-4); two-state ODE {two_ode:.1e} "
           f"(<= 1e-8), MC {two_z:+.2f} sigma; {elapsed:.0f} s (< 120 s)")


# -- 6 -------------------------------------------------------------------------

def test_criterion_06_mass_laws():
    lat_drift = part_drift = ext_drift = 0.0
    gronwall_excess = -np.inf
    for name in SCENARIOS:
        p = scenario(name)
        L = build_lattice(p.domain, 0.05)
        beta0 = project_initial(p.initial, L)
        steps = max(min_steps(p, L), 200)
        R = choose_R(p)
        lat = integrate(p, L, beta0, steps)
        ext = integrate(p, L, beta0, steps, extended=True, R=R)
        part = picard_solve(p, 200, steps=max(steps, 200)).flow
        ext_drift = max(ext_drift, float(np.abs(ext.totals() - R).max()) / R)
        for times, masses in ((lat.times, lat.masses()), (part.times, part.masses())):
            bound = np.array([mass_bound(p, t) for t in times]) * (1 + 1e-6)
            gronwall_excess = max(gronwall_excess, float(np.max(masses - bound)))
    for p in (scenario("advection1d"), scenario("attraction_opinion", kappa=0.0)):
        L = build_lattice(p.domain, 0.05)
        lat = integrate(p, L, project_initial(p.initial, L), max(min_steps(p, L), 200))
        part = picard_solve(p, 200, steps=200).flow
        m0 = p.initial.mass
        lat_drift = max(lat_drift, float(np.abs(lat.masses() - m0).max()))
        part_drift = max(part_drift, float(np.abs(part.masses() - m0).max()))
    ok = lat_drift <= 1e-10 and part_drift <= 1e-8 and ext_drift <= 1e-8 and gronwall_excess <= 0
    record(6, "mass laws", ok,
           f"g=0 drift lattice {lat_drift:.1e} (<= 1e-10), particles {part_drift:.1e} (<= 1e-8); "
           f"extended total drift {ext_drift:.1e}·R (<= 1e-8·R); Gronwall excess {gronwall_excess:.2e} (<= 0)")


# -- 7 -------------------------------------------------------------------------

TEST_FUNCTIONS = [bump([0.5], 0.5), bump([1.0], 0.8), bump([0.0], 0.5, velocity=[1.0]),
                  plateau([0.0], 0.5, 1.5), bump([-0.5], 0.7)]


def test_criterion_07_superposition_principle():
    t0 = time.perf_counter()
    ok = True
    parts = []
    for name in ("advection1d", "attraction_opinion"):
        p = scenario(name)
        res = []
        for steps in (100, 200, 400):
            N = 40_000 * (steps // 100) ** 2 // 16
            flow = picard_solve(p, N, steps=steps).flow
            res.append(max(weak_residual(p, flow, TEST_FUNCTIONS)))
        ratios = [res[i] / res[i + 1] for i in range(2)]
        ok &= all(r >= 3 for r in ratios) and res[-1] <= 1e-3
        parts.append(f"{name}: residuals {', '.join(f'{r:.2e}' for r in res)} ratios "
                     f"{', '.join(f'{r:.2f}' for r in ratios)}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 300
    record(7, "superposition principle", ok, f"{'; '.join(parts)} (>= 3x, finest <= 1e-3); {elapsed:.0f} s")


# -- 8 -------------------------------------------------------------------------

H_LIST = [0.2, 0.1, 0.05, 0.025]


@lru_cache(maxsize=None)
def _convergence(name):
    return convergence_study(scenario(name), H_LIST, ref_N=1000)


def test_criterion_08_rate():
    t0 = time.perf_counter()
    ok = True
    parts = []
    for name in ("advection1d", "attraction_opinion"):
        rep = _convergence(name)
        c_prev, c_last = rep.C_hat_without_last(), rep.C_hat
        change = max(c_last / c_prev, c_prev / c_last)
        ok &= 0.8 <= rep.slope <= 1.2 and change < 2
        parts.append(f"{name}: slope {rep.slope:.3f}, C_hat {c_prev:.3f} -> {c_last:.3f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 600
    record(8, "convergence rate", ok, f"{'; '.join(parts)} (slope in [0.8, 1.2], change < 2x); {elapsed:.0f} s")


# -- 9 -------------------------------------------------------------------------

def test_criterion_09_coupling_consistency():
    ok = True
    parts = []
    for name in SCENARIOS:
        p = scenario(name)
        # fitted constant where a convergence study exists; 1 where the lattice error is idle
        C_hat = _convergence(name).C_hat if name in ("advection1d", "attraction_opinion") else 1.0
        rep = coupling_consistency(p, 0.05, 10_000, seeds=tuple(range(8)), C_hat=C_hat)
        worst = max(rep.first_distance + rep.second_distance)
        ok &= rep.ok
        parts.append(f"{name}: {worst:.3f}/{rep.tolerance:.3f}")
    record(9, "coupling consistency", ok, "max distance/tolerance " + "; ".join(parts))


# -- 10 ------------------------------------------------------------------------

def test_criterion_10_picard_stability():
    ok = True
    parts = []
    for name in SCENARIOS:
        p = scenario(name)
        tol = 1e-6 * p.initial.mass
        a = picard_solve(p, 200, steps=200, start="frozen")
        b = picard_solve(p, 200, steps=200, start="zero")
        gap = float(flow_distance(a.flow, b.flow, p.default_b()).max())
        ok &= gap <= 10 * tol and max(a.iterations, b.iterations) <= 50
        parts.append(f"{name}: gap {gap:.1e}, iterations {a.iterations}/{b.iterations}")
    record(10, "Picard stability", ok, "; ".join(parts) + " (gap <= 10 tol, iterations <= 50)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))

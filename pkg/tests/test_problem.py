from __future__ import annotations

import json
import math

import numpy as np
import pytest

from nlbalance.measures import DiscreteMeasure, augment
from nlbalance.problem import (SCENARIOS, Box, check_invariants, choose_R, closed_form_mass, closed_form_measure,
                               f_R, g_R, growth_split, load_scenario_file, mass_bound, parse_scenario_spec,
                               scenario)

from conftest import static_problem


def test_box():
    K = Box([0.0, 0.0], [1.0, 2.0])
    assert K.dim == 2
    assert K.diameter == pytest.approx(math.sqrt(5))
    np.testing.assert_array_equal(K.contains([[0.5, 0.5], [1.5, 0.0]]), [True, False])
    np.testing.assert_allclose(K.distance([[2.0, 1.0], [0.5, 0.5]]), [1.0, 0.0])
    with pytest.raises(ValueError):
        Box([1.0], [0.0])


@pytest.mark.parametrize("mass,C_g,t,expected", [(1, 0, 1, 1), (2, 0.5, 2, 2 * math.e), (1, 1, 0, 1)])
def test_mass_bound_examples(mass, C_g, t, expected):
    p = static_problem(growth_rate=C_g, T=max(t, 1), initial=DiscreteMeasure.dirac([0.0], mass))
    assert mass_bound(p, t) == pytest.approx(expected)


@pytest.mark.parametrize("mass,C_g,T,expected", [(1, 0, 1, 2), (1, 1, 1, 2 * math.e), (0.5, math.log(2), 1, 2)])
def test_choose_R_examples(mass, C_g, T, expected):
    p = static_problem(growth_rate=C_g, T=T, initial=DiscreteMeasure.dirac([0.0], mass))
    assert choose_R(p) == pytest.approx(expected)


def test_catalog_entries():
    assert set(SCENARIOS) == {"advection1d", "pure_growth", "logistic_growth", "attraction_opinion"}
    a = scenario("advection1d")
    assert a.dim == 1 and a.domain.lower[0] == 0 and a.domain.upper[0] == 4
    X = np.array([[0.0], [2.0], [4.0]])
    np.testing.assert_allclose(a.velocity(0.0, X, a.initial), 1.0)
    np.testing.assert_allclose(a.growth(0.0, X, a.initial), 0.0)
    assert a.initial == DiscreteMeasure.dirac([0.0])
    g = scenario("pure_growth")
    np.testing.assert_allclose(g.velocity(0.0, X[:1], g.initial), 0.0)
    np.testing.assert_allclose(g.growth(0.0, X[:1], g.initial), 0.5)
    lg = scenario("logistic_growth")
    assert lg.initial.mass == pytest.approx(0.5)
    np.testing.assert_allclose(lg.growth(0.0, X[:1], DiscreteMeasure.dirac([0.0], 0.25)), 0.75)


@pytest.mark.parametrize("name", SCENARIOS)
def test_declared_bounds_hold(name):
    report = check_invariants(scenario(name), probes=100)
    assert report["ok"], report


def test_scenario_errors():
    with pytest.raises(ValueError):
        scenario("nope")
    with pytest.raises(ValueError):
        scenario("pure_growth", wrong=1)


def test_params_override():
    p = scenario("pure_growth", gamma=1.0)
    assert p.C_g == 1.0
    assert closed_form_mass(p, 1.0) == pytest.approx(math.e)
    q = p.with_params(gamma=0.25)
    assert q.C_g == 0.25


def test_logistic_closed_form_solves_ode():
    p = scenario("logistic_growth")
    t, dt = 0.4, 1e-6
    m = closed_form_mass(p, t)
    deriv = (closed_form_mass(p, t + dt) - closed_form_mass(p, t - dt)) / (2 * dt)
    assert deriv == pytest.approx(m * (1 - m), rel=1e-6)
    assert closed_form_mass(p, 1.0) == pytest.approx(1 / (1 + math.exp(-1)))


def test_closed_form_measures():
    a = scenario("advection1d")
    assert closed_form_measure(a, 0.5) == DiscreteMeasure.dirac([0.5])
    assert closed_form_measure(scenario("attraction_opinion"), 0.5) is None


def test_conservation_form_zero_outside_K():
    p = scenario("attraction_opinion")
    mu = augment(p.initial, choose_R(p))
    X = np.array([[0.0], [10.0]])
    assert f_R(p, 0.0, X, mu)[1, 0] == 0
    gp, gm = g_R(p, 0.0, X, mu)
    assert gp[1] == 0 and gm[1] == 0
    split = growth_split(p)
    g = p.growth(0.0, X[:1], p.initial)
    assert split.positive(0.0, X[:1], p.initial) - split.negative(0.0, X[:1], p.initial) == pytest.approx(g)


def test_scenario_file(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"scenario": "pure_growth", "overrides": {"gamma": 0.2, "h": 0.05, "N": 10}}))
    p, solver = load_scenario_file(path)
    assert p.params == {"gamma": 0.2}
    assert solver == {"h": 0.05, "N": 10}
    with pytest.raises(ValueError):
        parse_scenario_spec({"overrides": {}})

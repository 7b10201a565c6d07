from __future__ import annotations

import math

import numpy as np
import pytest

from nlbalance.lattice import Lattice, build_lattice, extended_matrix, fixed_builder, project_initial, \
    random_lattice_weights, upwind_matrix
from nlbalance.ode import StepGuardError, extended_rhs, generator_apply, integrate, min_steps, rhs
from nlbalance.problem import choose_R, scenario

from conftest import static_problem


def test_rhs_examples(two_state):
    L = Lattice([[0.0], [1.0]])
    p = static_problem(growth_rate=0.5)
    beta = np.array([0.3, 0.7])
    zero = fixed_builder(np.zeros((2, 2)))
    np.testing.assert_allclose(rhs(p, L, 0.0, beta, movement=zero), 0.5 * beta)
    np.testing.assert_allclose(rhs(p, L, 0.0, np.zeros(2), movement=zero), 0.0)
    problem, L2, Q = two_state
    np.testing.assert_allclose(rhs(problem, L2, 0.0, [1.0, 0.0], movement=Q), [-1.0, 1.0])


def test_pure_growth_mass():
    p = scenario("pure_growth")
    L = build_lattice(p.domain, 0.1)
    flow = integrate(p, L, project_initial(p.initial, L), 200)
    assert flow.masses()[-1] == pytest.approx(math.e, abs=1e-6)


def test_two_state_chain(two_state):
    problem, L, Q = two_state
    flow = integrate(problem, L, [1.0, 0.0], 100, movement=Q)
    assert flow.states[-1, 0] == pytest.approx(math.exp(-1), abs=1e-8)


def test_transport_conserves_mass():
    p = scenario("advection1d")
    L = build_lattice(p.domain, 0.05)
    flow = integrate(p, L, project_initial(p.initial, L), min_steps(p, L))
    assert np.abs(flow.masses() - 1.0).max() <= 1e-10
    assert (flow.states >= 0).all()


def test_extended_matches_plain():
    p = scenario("logistic_growth")
    L = build_lattice(p.domain, 0.1)
    R = choose_R(p)
    beta0 = project_initial(p.initial, L)
    plain = integrate(p, L, beta0, 100)
    ext = integrate(p, L, beta0, 100, extended=True, R=R)
    assert np.abs(ext.interior - plain.states).max() <= 1e-12
    assert np.abs(ext.totals() - R).max() <= 1e-8 * R


def test_extended_rhs_is_left_action(rng):
    p = scenario("attraction_opinion")
    L = build_lattice(p.domain, 0.25)
    R = choose_R(p)
    beta = random_lattice_weights(rng, L, 1.0)
    state = np.concatenate([beta, [R - beta.sum()]])
    E = extended_matrix(p, L, 0.2, beta, R).toarray()
    np.testing.assert_allclose(extended_rhs(p, L, 0.2, state, R), state @ E, atol=1e-12)
    # interior part coincides with the plain right-hand side
    np.testing.assert_allclose(extended_rhs(p, L, 0.2, state, R)[:-1], rhs(p, L, 0.2, beta), atol=1e-12)


def test_step_guard():
    p = scenario("advection1d")
    L = build_lattice(p.domain, 0.05)
    with pytest.raises(StepGuardError):
        integrate(p, L, project_initial(p.initial, L), 5)
    integrate(p, L, project_initial(p.initial, L), min_steps(p, L))


def test_bad_inputs():
    p = scenario("pure_growth")
    L = build_lattice(p.domain, 0.5)
    with pytest.raises(ValueError):
        integrate(p, L, -np.ones(L.n), 10)
    with pytest.raises(ValueError):
        integrate(p, L, np.zeros(3), 10)
    with pytest.raises(ValueError):
        integrate(p, L, np.zeros(L.n), 10, extended=True)


def test_generator_examples(two_state):
    p = scenario("attraction_opinion")
    L = build_lattice(p.domain, 0.25)
    R = choose_R(p)
    beta = project_initial(p.initial, L)
    mu = np.concatenate([beta, [R - beta.sum()]])
    np.testing.assert_allclose(generator_apply(p, L, 0.0, mu, np.ones(L.n + 1)), 0.0, atol=1e-12)
    problem, L2, Q = two_state
    phi = np.array([3.0, -1.0, 7.0])
    out = generator_apply(problem, L2, 0.0, np.array([0.5, 0.2, 1.3]), phi, movement=Q)
    np.testing.assert_allclose(out, [(-1.0 - 3.0), 0.0, 0.0])


def test_generator_pure_death_single_state():
    # one state in K; the second lattice point lies outside K and is inert there
    p = static_problem(growth_rate=-1.0, box=((0.0,), (0.0,)))
    L = Lattice([[0.0], [5.0]], box=p.domain)
    zero = fixed_builder(np.zeros((2, 2)))
    out = generator_apply(p, L, 0.0, np.array([1.0, 0.0, 1.0]), np.array([2.0, 0.0, 0.0]), movement=zero)
    np.testing.assert_allclose(out, [-2.0, 0.0, 0.0])


def test_generator_matches_matrix(rng):
    for name in ("attraction_opinion", "logistic_growth", "pure_growth"):
        p = scenario(name)
        L = build_lattice(p.domain, 0.25)
        R = choose_R(p)
        for _ in range(5):
            beta = random_lattice_weights(rng, L, 0.8 * R / 2)
            mu = np.concatenate([beta, [R - beta.sum()]])
            phi = rng.normal(size=L.n + 1)
            E = extended_matrix(p, L, 0.1, beta, R).toarray()
            np.testing.assert_allclose(generator_apply(p, L, 0.1, mu, phi), E @ phi, atol=1e-10)
            # adjoint identity: <mu, L phi> = <mu E, phi>
            assert mu @ (E @ phi) == pytest.approx((mu @ E) @ phi, abs=1e-10)


def test_generator_reduces_to_movement_without_growth(rng):
    p = scenario("advection1d")
    L = build_lattice(p.domain, 0.5)
    beta = random_lattice_weights(rng, L, 1.0)
    mu = np.concatenate([beta, [2.0 - beta.sum()]])
    phi = rng.normal(size=L.n + 1)
    Q = upwind_matrix(p, L, 0.0, beta).toarray()
    np.testing.assert_allclose(generator_apply(p, L, 0.0, mu, phi)[:-1], Q @ phi[:-1], atol=1e-12)


def test_csv_schema():
    p = scenario("pure_growth")
    L = build_lattice(p.domain, 0.5)
    flow = integrate(p, L, project_initial(p.initial, L), 4, extended=True, R=choose_R(p))
    lines = flow.to_csv().splitlines()
    assert lines[0] == "t,state,weight"
    assert lines[L.n + 1].split(",")[1] == "*"
    assert len(lines) == 1 + 5 * (L.n + 1)

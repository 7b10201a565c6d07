"""Fixed-step RK4 integration of the lattice ODE system.

The plain system evolves the row vector ``beta`` by ``beta Q(t, beta) +
beta G(t, beta)``.  The extended (conservation) form evolves
``(beta, beta_star)`` by the Kolmogorov matrix on the lattice plus the remote
point and keeps the total ``R`` fixed.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .lattice import (Lattice, MovementBuilder, _extended_from_parts, check_headroom, growth_values,
                      to_measure, upwind_builder)
from .measures import DiscreteMeasure
from .problem import BalanceProblem

log = logging.getLogger(__name__)

STEP_GUARD = 0.5
CLAMP_LIMIT = 1e-10


class StepGuardError(ValueError):
    pass


class PositivityError(RuntimeError):
    pass


@dataclass
class LatticeFlow:
    times: np.ndarray
    states: np.ndarray  # (n_times, n) or (n_times, n + 1) with the star last
    lattice: Lattice
    extended: bool = False
    R: float | None = None
    clamped: list = field(default_factory=list)

    @property
    def interior(self) -> np.ndarray:
        return self.states[:, : self.lattice.n]

    def masses(self) -> np.ndarray:
        return self.interior.sum(axis=1)

    def totals(self) -> np.ndarray:
        return self.states.sum(axis=1)

    def measure(self, k: int) -> DiscreteMeasure:
        return to_measure(self.interior[k], self.lattice)

    def measure_at(self, t: float) -> DiscreteMeasure:
        return self.measure(int(np.argmin(np.abs(self.times - t))))

    def to_csv(self, path=None) -> str:
        n = self.lattice.n
        lines = ["t,state,weight"]
        for t, row in zip(self.times, self.states):
            for j, w in enumerate(row):
                lines.append(f"{float(t)!r},{'*' if j == n else j},{float(w)!r}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


class _System:
    """Right-hand side evaluator carrying the step-guard bookkeeping."""

    def __init__(self, problem, lattice, extended, R, movement):
        self.problem = problem
        self.lattice = lattice
        self.extended = extended
        self.R = R
        self.movement = movement or upwind_builder(problem, lattice)

    def parts(self, t, state):
        n = self.lattice.n
        beta = np.maximum(state[:n], 0.0)
        m = to_measure(beta, self.lattice)
        Q = self.movement(t, beta, m)
        g = growth_values(self.problem, self.lattice, t, beta, m)
        return Q, g

    def evaluate(self, t, state):
        """Time derivative and the largest diagonal rate magnitude."""
        Q, g = self.parts(t, state)
        if self.extended:
            n = self.lattice.n
            beta = np.maximum(state[:n], 0.0)
            check_headroom(float(beta.sum()), self.R)
            E = _extended_from_parts(Q, g, beta, self.R)
            return E.T @ state, float(np.max(np.abs(E.diagonal())))
        return Q.T @ state + g * state, float(np.max(np.abs(Q.diagonal()) + np.abs(g)))

    def __call__(self, t, state):
        return self.evaluate(t, state)[0]


def rhs(problem: BalanceProblem, lattice: Lattice, t: float, beta, movement: MovementBuilder | None = None):
    """``beta Q(t, beta) + beta G(t, beta)`` in the row-vector convention."""
    beta = np.asarray(beta, dtype=float)
    return _System(problem, lattice, False, None, movement)(t, beta)


def extended_rhs(problem, lattice, t, state, R, movement=None):
    return _System(problem, lattice, True, R, movement)(t, np.asarray(state, dtype=float))


def min_steps(problem: BalanceProblem, lattice: Lattice, T: float | None = None) -> int:
    """A step count satisfying the guard, from the declared bounds."""
    T = problem.horizon if T is None else T
    if lattice.spacing is not None:
        q = math.sqrt(lattice.dim) * problem.C_f / lattice.spacing
    else:
        q = 0.0
    return max(1, math.ceil(T * (q + problem.C_g) / STEP_GUARD * (1 - 1e-12)))


def integrate(problem: BalanceProblem, lattice: Lattice, beta0, steps: int, extended: bool = False,
              R: float | None = None, movement: MovementBuilder | None = None,
              T: float | None = None) -> LatticeFlow:
    """Classical RK4 on ``steps`` equal steps over ``[0, T]``.

    In extended mode ``beta0`` may have ``n`` entries (the star entry is then
    ``R - |beta0|``) or ``n + 1`` entries with a consistent star entry.
    """
    T = problem.horizon if T is None else float(T)
    if steps < 1:
        raise ValueError("steps must be positive")
    n = lattice.n
    beta0 = np.asarray(beta0, dtype=float)
    if np.any(beta0 < 0):
        raise ValueError("initial weights must be nonnegative")
    if extended:
        if R is None:
            raise ValueError("extended mode requires R")
        if beta0.size == n:
            check_headroom(float(beta0.sum()), R)
            state = np.concatenate([beta0, [R - beta0.sum()]])
        elif beta0.size == n + 1:
            if abs(beta0.sum() - R) > 1e-12 * R:
                raise ValueError("extended initial state must sum to R")
            state = beta0.copy()
        else:
            raise ValueError("initial vector has the wrong length")
    else:
        if beta0.size != n:
            raise ValueError("initial vector has the wrong length")
        state = beta0.copy()
    system = _System(problem, lattice, extended, R, movement)
    dt = T / steps
    times = np.linspace(0.0, T, steps + 1)
    out = np.empty((steps + 1, state.size))
    out[0] = state
    clamped = []
    for k in range(steps):
        t = times[k]
        k1, scale = system.evaluate(t, state)
        if dt * scale > STEP_GUARD * (1 + 1e-12):
            raise StepGuardError(f"step {dt:.3g} times rate {scale:.3g} exceeds {STEP_GUARD}; "
                                 f"use at least {math.ceil(T * scale / STEP_GUARD)} steps")
        k2 = system(t + dt / 2, state + dt / 2 * k1)
        k3 = system(t + dt / 2, state + dt / 2 * k2)
        k4 = system(t + dt, state + dt * k3)
        new = state + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        neg = new < 0
        if np.any(neg):
            lost = float(-new[neg].sum())
            ref = float(np.abs(new).sum())
            clamped.append((k + 1, lost))
            log.debug("step %d: clamped %.3e of negative mass", k + 1, lost)
            if lost > CLAMP_LIMIT * max(ref, 1e-300):
                raise PositivityError(f"step {k + 1}: negative mass {lost:.3e} above the clamp limit")
            new[neg] = 0.0
        state = new
        out[k + 1] = state
    return LatticeFlow(times, out, lattice, extended, R, clamped)


def generator_apply(problem: BalanceProblem, lattice: Lattice, t: float, mu, phi,
                    movement: MovementBuilder | None = None) -> np.ndarray:
    """Apply the conservation-form generator at ``mu`` to a test vector ``phi``.

    ``mu`` holds weights on the lattice followed by the star weight (any
    positive total; the lattice part is the measure fed to the oracles) and
    ``phi`` has the same layout.  The value at each state is assembled term by
    term from movement, death into the star and birth out of the star.
    """
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    n = lattice.n
    if mu.size != n + 1 or phi.size != n + 1:
        raise ValueError("mu and phi need one entry per lattice point plus the star")
    beta = mu[:n]
    m = to_measure(beta, lattice)
    Q = sp.csr_matrix((movement or upwind_builder(problem, lattice))(t, beta, m))
    g = growth_values(problem, lattice, t, beta, m)
    gp, gm = np.maximum(g, 0.0), np.maximum(-g, 0.0)
    out = np.zeros(n + 1)
    coo = Q.tocoo()
    off = coo.row != coo.col
    np.add.at(out, coo.row[off], (phi[coo.col[off]] - phi[coo.row[off]]) * coo.data[off])
    out[:n] += (phi[n] - phi[:n]) * gm
    if np.any(gp > 0):
        if mu[n] <= 0:
            raise ValueError("birth term undefined: no mass at the remote point")
        out[n] = np.sum((phi[:n] - phi[n]) * gp * beta) / mu[n]
    return out

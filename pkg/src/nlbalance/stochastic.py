"""Particle simulators for the conservation form on the lattice plus the star.

Two processes are provided.

``simulate_chain`` moves ``N`` exchangeable particles on the lattice and the
remote point with the rates of the extended Kolmogorov matrix evaluated at the
empirical weights ``R * (fraction per state)``.

``simulate_coupled`` moves pairs ``(X, X^Q)``: the first component follows the
drift on ``K`` between jumps while the second jumps on the lattice; deaths
and births are synchronized by the min-coupling.  The mean pairwise distance is
the coupling gap.

Both use per-step thinning: a particle whose total rate at the start of the
step is ``r`` jumps with probability ``1 - exp(-r dt)``, to a destination drawn
proportionally to the individual rates.  Random numbers come from a Philox
stream keyed by ``(seed, step)``; particle ``i`` always consumes the ``i``-th
draws of that stream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .lattice import (Lattice, MovementBuilder, extended_matrix, growth_values, project_initial,
                      to_measure, upwind_builder)
from .measures import STAR, DiscreteMeasure, augment, prw, wasserstein1
from .ode import LatticeFlow
from .problem import BalanceProblem

RATE_GUARD = 0.1


class StepGuardError(ValueError):
    pass


class HeadroomExhausted(RuntimeError):
    pass


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(step)])))


def largest_remainder(p, N: int) -> np.ndarray:
    """Integer counts summing to ``N`` proportional to ``p`` (ties to the earlier entry)."""
    p = np.asarray(p, float)
    p = p / p.sum()
    raw = p * N
    counts = np.floor(raw).astype(np.int64)
    short = N - int(counts.sum())
    if short > 0:
        order = np.lexsort((np.arange(p.size), -(raw - counts)))
        counts[order[:short]] += 1
    return counts


def _draw_offdiag(M: sp.csr_matrix, rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Column drawn proportionally to the off-diagonal entries of each requested row."""
    M = M.tocsr()
    coo = M.tocoo()
    off = (coo.row != coo.col) & (coo.data > 0)
    O = sp.csr_matrix((coo.data[off], (coo.row[off], coo.col[off])), shape=M.shape)
    O.sort_indices()
    cum = np.cumsum(O.data)
    start = np.concatenate([[0.0], cum])[O.indptr[:-1]]
    total = np.asarray(O.sum(axis=1)).ravel()
    target = start[rows] + u * total[rows]
    k = np.searchsorted(cum, target, side="right")
    k = np.clip(k, O.indptr[rows], O.indptr[rows + 1] - 1)
    return O.indices[k]


@dataclass
class ChainResult:
    flow: LatticeFlow
    counts: np.ndarray  # (n_times, n + 1) particle counts, star last
    N: int


def initial_counts(beta0: np.ndarray, R: float, N: int) -> np.ndarray:
    ext = np.concatenate([beta0, [R - beta0.sum()]])
    return largest_remainder(ext, N)


def simulate_chain(problem: BalanceProblem, lattice: Lattice, N: int, steps: int, R: float, seed: int = 0,
                   beta0=None, movement: MovementBuilder | None = None, T: float | None = None) -> ChainResult:
    """Mean-field particle simulation of the extended lattice chain."""
    if N < 1:
        raise ValueError("N must be positive")
    T = problem.horizon if T is None else float(T)
    n = lattice.n
    if beta0 is None:
        beta0 = project_initial(problem.initial, lattice)
    beta0 = np.asarray(beta0, float)
    movement = movement or upwind_builder(problem, lattice)
    counts0 = initial_counts(beta0, R, N)
    state = np.repeat(np.arange(n + 1), counts0)
    dt = T / steps
    times = np.linspace(0.0, T, steps + 1)
    hist = np.empty((steps + 1, n + 1), dtype=np.int64)
    hist[0] = counts0
    for k in range(steps):
        counts = hist[k]
        beta = R * counts[:n] / N
        E = extended_matrix(problem, lattice, times[k], beta, R, movement).matrix
        rate = -E.diagonal()
        occupied = counts > 0
        rmax = float(rate[occupied].max()) if np.any(occupied) else 0.0
        if dt * rmax > RATE_GUARD * (1 + 1e-12):
            raise StepGuardError(f"dt * max rate = {dt * rmax:.3g} exceeds {RATE_GUARD}; "
                                 f"use at least {math.ceil(T * rmax / RATE_GUARD)} steps")
        u = step_rng(seed, k).random((N, 2))
        r = rate[state]
        jump = u[:, 0] < -np.expm1(-r * dt)
        if np.any(jump):
            state[jump] = _draw_offdiag(E, state[jump], u[jump, 1])
        hist[k + 1] = np.bincount(state, minlength=n + 1)
    flow = LatticeFlow(times, R * hist / N, lattice, extended=True, R=R)
    return ChainResult(flow, hist, N)


# -- coupled process ----------------------------------------------------------

@dataclass(frozen=True)
class JumpRates:
    """Coupled jump rates of one pair.

    ``death_pair`` holds the rates of the joint death, the death of the first
    component alone and of the second alone.  ``birth`` lists
    ``(first, second, rate)`` targets and is nonempty only at ``(STAR, STAR)``;
    ``first`` is a point or ``STAR`` and ``second`` a lattice index or ``STAR``.
    """

    death_pair: tuple
    birth: list = field(default_factory=list)

    @property
    def birth_total(self) -> float:
        return float(sum(r for _, _, r in self.birth))


def min_coupling(g1m, g2m):
    """Joint / first-only / second-only death rates from the two death rates."""
    g1m = np.asarray(g1m, float)
    g2m = np.asarray(g2m, float)
    r11 = np.minimum(g1m, g2m)
    return r11, g1m - r11, g2m - r11


@dataclass
class PairEnsemble:
    """``N`` pairs; ``x1[i]`` is ignored when ``star1[i]``; ``x2[i] == n`` encodes the star."""

    x1: np.ndarray     # (N, d)
    star1: np.ndarray  # (N,) bool
    x2: np.ndarray     # (N,) lattice index, n for the star

    @property
    def N(self) -> int:
        return self.x2.size

    def first_marginal(self, R: float) -> DiscreteMeasure:
        alive = ~self.star1
        return DiscreteMeasure(self.x1[alive], np.full(int(alive.sum()), R / self.N))

    def second_weights(self, lattice: Lattice, R: float) -> np.ndarray:
        return R * np.bincount(self.x2, minlength=lattice.n + 1)[: lattice.n] / self.N

    def copy(self) -> "PairEnsemble":
        return PairEnsemble(self.x1.copy(), self.star1.copy(), self.x2.copy())


def _pair_growth(problem, lattice, t, pairs: PairEnsemble, R):
    """``g`` of each component under its own marginal (zero at the star and off ``K``)."""
    n = lattice.n
    mu1 = pairs.first_marginal(R)
    beta = pairs.second_weights(lattice, R)
    mu2 = to_measure(beta, lattice)
    alive1 = ~pairs.star1
    g1 = np.zeros(pairs.N)
    if np.any(alive1):
        X = pairs.x1[alive1]
        vals = np.asarray(problem.growth(t, X, mu1), float).reshape(-1)
        g1[alive1] = np.where(problem.domain.contains(X), vals, 0.0)
    gl = growth_values(problem, lattice, t, beta, mu2)
    g2 = np.concatenate([gl, [0.0]])[pairs.x2]
    return g1, g2, mu1, beta, mu2


def coupled_rates(problem: BalanceProblem, lattice: Lattice, t: float, index: int, pairs: PairEnsemble,
                  R: float) -> JumpRates:
    """Jump rates of pair ``index`` given the current empirical pair distribution."""
    n = lattice.n
    g1, g2, *_ = _pair_growth(problem, lattice, t, pairs, R)
    r11, r10, r01 = min_coupling(np.maximum(-g1[index], 0), np.maximum(-g2[index], 0))
    death = (float(r11), float(r10), float(r01))
    birth = []
    if pairs.star1[index] and pairs.x2[index] == n:
        both_star = pairs.star1 & (pairs.x2 == n)
        theta_ss = both_star.sum() / pairs.N
        gp1, gp2 = np.maximum(g1, 0), np.maximum(g2, 0)
        for j in range(pairs.N):
            y1 = STAR if pairs.star1[j] else pairs.x1[j].copy()
            y2 = STAR if pairs.x2[j] == n else int(pairs.x2[j])
            lo = min(gp1[j], gp2[j])
            scale = 1.0 / (pairs.N * theta_ss)
            if lo > 0:
                birth.append((y1, y2, lo * scale))
            if gp1[j] > gp2[j]:
                birth.append((y1, STAR, (gp1[j] - gp2[j]) * scale))
            if gp2[j] > gp1[j]:
                birth.append((STAR, y2, (gp2[j] - gp1[j]) * scale))
    return JumpRates(death, birth)


def initial_pairs(problem: BalanceProblem, lattice: Lattice, beta0, N: int, R: float, b_param: float) -> PairEnsemble:
    """Quantize an optimal plan between the normalized extensions of ``m0`` and ``beta0``."""
    n = lattice.n
    m0 = problem.initial
    m2 = to_measure(beta0, lattice)
    _, plan = wasserstein1(augment(m0, R), augment(m2, R), b_param)
    counts = largest_remainder(plan.masses, N)
    src = np.repeat(plan.sources, counts)
    tgt = np.repeat(plan.targets, counts)
    star1 = src < 0
    x1 = np.zeros((N, problem.dim))
    x1[~star1] = m0.points[src[~star1]]
    idx2 = np.full(N, n, dtype=np.int64)
    if m2.size:
        lat_idx = lattice.locate(m2.points)
        idx2[tgt >= 0] = lat_idx[tgt[tgt >= 0]]
    return PairEnsemble(x1, star1, idx2)


def pair_distance(pairs: PairEnsemble, lattice: Lattice, b_param: float) -> np.ndarray:
    n = lattice.n
    s1 = pairs.star1
    s2 = pairs.x2 == n
    pts2 = lattice.points[np.minimum(pairs.x2, n - 1)]
    d = np.minimum(np.linalg.norm(pairs.x1 - pts2, axis=1), 2 * b_param)
    d = np.where(s1 ^ s2, b_param, d)
    return np.where(s1 & s2, 0.0, d)


@dataclass
class CoupledResult:
    times: np.ndarray
    gap: np.ndarray
    gap_regularized: np.ndarray
    mass_first: np.ndarray
    mass_second: np.ndarray
    star_pairs: np.ndarray
    checkpoints: np.ndarray
    first_marginals: list
    second_flow: LatticeFlow
    reference_distance: np.ndarray | None = None
    epsilon: float = 0.0


def _drift(problem, t, dt, X, mu1):
    """RK4 step of the drift with the first marginal frozen over the step."""
    K = problem.domain

    def f(s, Y):
        V = np.asarray(problem.velocity(s, Y, mu1), float).reshape(Y.shape)
        return np.where(K.contains(Y)[:, None], V, 0.0)

    k1 = f(t, X)
    k2 = f(t + dt / 2, X + dt / 2 * k1)
    k3 = f(t + dt / 2, X + dt / 2 * k2)
    k4 = f(t + dt, X + dt * k3)
    return X + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def simulate_coupled(problem: BalanceProblem, lattice: Lattice, N: int, steps: int, R: float, seed: int = 0,
                     flow_ref=None, beta0=None, movement: MovementBuilder | None = None,
                     b_param: float | None = None, epsilon: float | None = None,
                     checkpoints=None) -> CoupledResult:
    """Simulate the coupled pair process and record the coupling gap.

    ``flow_ref`` (a ``MeasureFlow``) is optional; when given, the PRW distance
    between the first marginal and the reference flow is recorded at the
    checkpoints.  ``checkpoints`` are step indices (default: 5 evenly spaced
    grid times ending at ``T``).
    """
    T = problem.horizon
    n = lattice.n
    b_param = problem.default_b() if b_param is None else b_param
    if epsilon is None:
        epsilon = lattice.spacing or lattice.fineness
    if beta0 is None:
        beta0 = project_initial(problem.initial, lattice)
    movement = movement or upwind_builder(problem, lattice)
    pairs = initial_pairs(problem, lattice, np.asarray(beta0, float), N, R, b_param)
    dt = T / steps
    times = np.linspace(0.0, T, steps + 1)
    if checkpoints is None:
        checkpoints = np.unique(np.round(np.linspace(0, steps, 6)[1:]).astype(int))
    checkpoints = np.asarray(checkpoints, dtype=int)
    gap = np.empty(steps + 1)
    reg = np.empty(steps + 1)
    m1 = np.empty(steps + 1)
    star_pairs = np.empty(steps + 1, dtype=np.int64)
    counts2 = np.empty((steps + 1, n + 1), dtype=np.int64)
    marginals = []

    def record(k):
        d = pair_distance(pairs, lattice, b_param)
        gap[k] = d.mean()
        reg[k] = np.sqrt(d * d + epsilon ** 2).mean()
        m1[k] = R * (~pairs.star1).sum() / N
        star_pairs[k] = int((pairs.star1 & (pairs.x2 == n)).sum())
        counts2[k] = np.bincount(pairs.x2, minlength=n + 1)
        if k in checkpoints:
            marginals.append(pairs.first_marginal(R))

    record(0)
    for k in range(steps):
        t = times[k]
        g1, g2, mu1, beta, mu2 = _pair_growth(problem, lattice, t, pairs, R)
        Q = sp.csr_matrix(movement(t, beta, mu2))
        qout = np.concatenate([-Q.diagonal(), [0.0]])
        d11, d10, d01 = min_coupling(np.maximum(-g1, 0), np.maximum(-g2, 0))
        both_star = pairs.star1 & (pairs.x2 == n)
        n_ss = int(both_star.sum())
        gp1, gp2 = np.maximum(g1, 0), np.maximum(g2, 0)
        gmax = np.maximum(gp1, gp2)
        birth_total = 0.0
        if np.any(gmax > 0):
            if n_ss == 0:
                raise HeadroomExhausted("birth requested with no (star, star) pairs left")
            birth_total = float(gmax.sum()) / n_ss  # = theta_ss^{-1} * mean(max g+)
        move = qout[pairs.x2]
        total = d11 + d10 + d01 + move + np.where(both_star, birth_total, 0.0)
        rmax = float(total.max()) if total.size else 0.0
        if dt * rmax > RATE_GUARD * (1 + 1e-12):
            raise StepGuardError(f"dt * max rate = {dt * rmax:.3g} exceeds {RATE_GUARD}; "
                                 f"use at least {math.ceil(T * rmax / RATE_GUARD)} steps")
        u = step_rng(seed, k).random((N, 3))
        jump = u[:, 0] < -np.expm1(-total * dt)
        # drift of living first components with the marginal frozen at the step start
        alive = ~pairs.star1
        new = pairs.copy()
        if np.any(alive) and problem.C_f > 0:
            new.x1[alive] = _drift(problem, t, dt, pairs.x1[alive], mu1)
        idx = np.flatnonzero(jump)
        if idx.size:
            v = u[idx, 1] * total[idx]
            c1 = d11[idx]
            c2 = c1 + d10[idx]
            c3 = c2 + d01[idx]
            c4 = c3 + move[idx]
            kind = np.select([v < c1, v < c2, v < c3, v < c4], [0, 1, 2, 3], 4)
            sel = idx[kind == 0]
            new.star1[sel] = True
            new.x2[sel] = n
            new.star1[idx[kind == 1]] = True
            new.x2[idx[kind == 2]] = n
            sel = idx[kind == 3]
            if sel.size:
                new.x2[sel] = _draw_offdiag(Q, pairs.x2[sel], u[sel, 2])
            sel = idx[kind == 4]
            if sel.size:
                # source pair j with probability proportional to max(g1+, g2+)
                cum = np.cumsum(gmax)
                j = np.minimum(np.searchsorted(cum, u[sel, 2] * cum[-1], side="right"), N - 1)
                lo = np.minimum(gp1[j], gp2[j])
                # reuse the residual of the event draw for the outcome choice
                w = (v[kind == 4] - c4[kind == 4]) / np.maximum(birth_total, 1e-300)
                w = np.clip(w, 0.0, 1.0) * gmax[j]
                first_born = (w < lo) | (gp1[j] > gp2[j])
                second_born = (w < lo) | (gp2[j] > gp1[j])
                born1 = sel[first_born]
                new.star1[born1] = False
                new.x1[born1] = new.x1[j[first_born]]
                born2 = sel[second_born]
                new.x2[born2] = pairs.x2[j[second_born]]
        pairs = new
        record(k + 1)
    second = LatticeFlow(times, R * counts2 / N, lattice, extended=True, R=R)
    ref = None
    if flow_ref is not None:
        ref = np.array([prw(marginals[i], flow_ref.at(times[c]), b_param) for i, c in enumerate(checkpoints)])
    return CoupledResult(times, gap, reg, m1, second.masses(), star_pairs, checkpoints, marginals, second,
                         ref, float(epsilon))

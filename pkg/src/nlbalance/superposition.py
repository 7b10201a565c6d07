"""Lagrangian solver: weighted curves and the self-consistent Picard iteration.

Each record is a curve ``x(t)`` carrying a weight ``w(t)`` with

    x' = f(t, x, m(t)),    w' = g(t, x, m(t)) w,    w(0) = |m0|,

and the measure at time ``t`` is the probability-weighted sum of
``w(t) delta(x(t))`` over records.  Records started from the same point are
identical, so each distinct starting point is stored once together with its
aggregated probability.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .measures import DiscreteMeasure, prw
from .problem import BalanceProblem, mass_bound

log = logging.getLogger(__name__)

STEP_GUARD = 0.5
EXACT_PRW_ATOMS = 400
MAX_SPLIT_DEPTH = 6


class PicardError(RuntimeError):
    def __init__(self, message, residuals):
        super().__init__(message)
        self.residuals = residuals


@dataclass
class MeasureFlow:
    """Measures on a time grid stored as aligned atom arrays.

    ``points[k, i]`` and ``weights[k, i]`` describe atom ``i`` at ``times[k]``;
    keeping the atom identity across times lets the flow be interpolated
    atom by atom.
    """

    times: np.ndarray
    points: np.ndarray   # (n_times, n_atoms, d)
    weights: np.ndarray  # (n_times, n_atoms)

    @classmethod
    def constant(cls, times, m: DiscreteMeasure) -> "MeasureFlow":
        nt = len(times)
        return cls(np.asarray(times, float), np.repeat(m.points[None], nt, axis=0),
                   np.repeat(m.weights[None], nt, axis=0))

    @classmethod
    def zero(cls, times, dim: int) -> "MeasureFlow":
        nt = len(times)
        return cls(np.asarray(times, float), np.zeros((nt, 0, dim)), np.zeros((nt, 0)))

    @classmethod
    def from_measures(cls, times, measures) -> "MeasureFlow":
        """Flow from unrelated measures (atoms padded with zero weight)."""
        measures = list(measures)
        dim = next((m.dim for m in measures if m.size), 1)
        n = max((m.size for m in measures), default=0)
        P = np.zeros((len(measures), n, dim))
        W = np.zeros((len(measures), n))
        for k, m in enumerate(measures):
            P[k, : m.size] = m.points
            W[k, : m.size] = m.weights
            if m.size:
                P[k, m.size:] = m.points[0]
        return cls(np.asarray(times, float), P, W)

    @property
    def dim(self) -> int:
        return self.points.shape[2]

    def masses(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    def measure(self, k: int) -> DiscreteMeasure:
        return DiscreteMeasure(self.points[k], self.weights[k])

    def measures(self):
        return [self.measure(k) for k in range(len(self.times))]

    def atoms_at(self, t: float):
        """Atom-wise linear interpolation in time (no merging)."""
        times = self.times
        if t <= times[0]:
            return self.points[0], self.weights[0]
        if t >= times[-1]:
            return self.points[-1], self.weights[-1]
        k = int(np.searchsorted(times, t, side="right") - 1)
        k = min(k, len(times) - 2)
        th = (t - times[k]) / (times[k + 1] - times[k])
        if th <= 1e-14:
            return self.points[k], self.weights[k]
        if th >= 1 - 1e-14:
            return self.points[k + 1], self.weights[k + 1]
        return ((1 - th) * self.points[k] + th * self.points[k + 1],
                (1 - th) * self.weights[k] + th * self.weights[k + 1])

    def at(self, t: float) -> DiscreteMeasure:
        return DiscreteMeasure(*self.atoms_at(t))

    def to_csv(self, path=None) -> str:
        lines = ["t,state,weight,point"]
        for k, t in enumerate(self.times):
            m = self.measure(k)
            for i, (p, w) in enumerate(zip(m.points, m.weights)):
                lines.append(f"{float(t)!r},{i},{float(w)!r},{' '.join(repr(float(v)) for v in p)}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


@dataclass
class WeightedCurveEnsemble:
    times: np.ndarray
    positions: np.ndarray  # (n_times, n_records, d)
    weights: np.ndarray    # (n_times, n_records)
    prob: np.ndarray       # (n_records,), sums to 1
    n_particles: int = 0   # nominal sample size N the records were built from

    @property
    def n_records(self) -> int:
        return self.prob.size


def evaluate_flow(ensemble: WeightedCurveEnsemble) -> MeasureFlow:
    return MeasureFlow(ensemble.times, ensemble.positions, ensemble.weights * ensemble.prob[None, :])


def quantize_initial(m0: DiscreteMeasure, N: int):
    """Equal-mass quantization of ``m0 / |m0|`` into ``N`` particles.

    Each atom receives a particle count by largest-remainder rounding (ties go
    to the earlier atom).  Returns the distinct starting points and their
    probabilities ``count / N``.
    """
    if N < 1:
        raise ValueError("N must be positive")
    if m0.size == 0:
        raise ValueError("initial measure is empty")
    p = m0.weights / m0.mass
    raw = p * N
    counts = np.floor(raw).astype(np.int64)
    short = N - int(counts.sum())
    if short > 0:
        order = np.lexsort((np.arange(p.size), -(raw - counts)))
        counts[order[:short]] += 1
    keep = counts > 0
    return m0.points[keep].copy(), counts[keep] / N


def sample_initial(m0: DiscreteMeasure, N: int, seed: int):
    """I.i.d. sample of ``N`` starting points from ``m0 / |m0|``, grouped by atom."""
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(N, m0.weights / m0.mass)
    keep = counts > 0
    return m0.points[keep].copy(), counts[keep] / N


def _guard(problem: BalanceProblem, dt: float):
    rate = max(problem.C_Lf, problem.C_g)
    if dt * rate > STEP_GUARD * (1 + 1e-12):
        raise ValueError(f"step {dt:.3g} too large: need dt * max(C_Lf, C_g) <= {STEP_GUARD}")


def min_steps(problem: BalanceProblem) -> int:
    rate = max(problem.C_Lf, problem.C_g)
    return max(1, math.ceil(problem.horizon * rate / STEP_GUARD * (1 - 1e-12)))


def propagate(problem: BalanceProblem, flow: MeasureFlow, initial_points, prob=None, initial_weights=None,
              n_particles: int = 0) -> WeightedCurveEnsemble:
    """Integrate the curves with the field frozen to ``flow`` (RK4 on its grid)."""
    X = np.array(initial_points, dtype=float).reshape(-1, problem.dim)
    n = X.shape[0]
    prob = np.full(n, 1.0 / n) if prob is None else np.asarray(prob, dtype=float)
    if initial_weights is None:
        W = np.full(n, problem.initial.mass)
    else:
        W = np.broadcast_to(np.asarray(initial_weights, dtype=float), (n,)).copy()
    times = flow.times
    nt = len(times)
    pos = np.empty((nt, n, problem.dim))
    wts = np.empty((nt, n))
    pos[0], wts[0] = X, W
    if nt > 1:
        _guard(problem, float(np.max(np.diff(times))))
    f, g = problem.velocity, problem.growth
    cache = {}

    def field_at(t):
        if t not in cache:
            if len(cache) > 2:
                cache.clear()
            cache[t] = DiscreteMeasure(*flow.atoms_at(t)) if flow.weights.shape[1] else DiscreteMeasure.empty(problem.dim)
        return cache[t]

    def deriv(t, x, w):
        m = field_at(t)
        return np.asarray(f(t, x, m), float).reshape(x.shape), np.asarray(g(t, x, m), float).reshape(-1) * w

    for k in range(nt - 1):
        t0, t1 = times[k], times[k + 1]
        dt = t1 - t0
        th = t0 + dt / 2
        a1, b1 = deriv(t0, X, W)
        a2, b2 = deriv(th, X + dt / 2 * a1, W + dt / 2 * b1)
        a3, b3 = deriv(th, X + dt / 2 * a2, W + dt / 2 * b2)
        a4, b4 = deriv(t1, X + dt * a3, W + dt * b3)
        X = X + dt / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
        W = np.maximum(W + dt / 6 * (b1 + 2 * b2 + 2 * b3 + b4), 0.0)
        pos[k + 1], wts[k + 1] = X, W
    return WeightedCurveEnsemble(times, pos, wts, prob, n_particles)


def coupling_bound(a: MeasureFlow, b: MeasureFlow, k: int, b_param: float) -> float:
    """Upper bound on the PRW distance from the atom-by-atom coupling of two aligned flows."""
    wa, wb = a.weights[k], b.weights[k]
    d = np.linalg.norm(a.points[k] - b.points[k], axis=1)
    return float(np.sum(np.minimum(wa, wb) * np.minimum(d, 2 * b_param) + b_param * np.abs(wa - wb)))


def flow_distance(a: MeasureFlow, b: MeasureFlow, b_param: float, exact: bool | None = None) -> np.ndarray:
    """PRW distance at every grid time.

    Exact LP evaluation when both sides have few atoms; otherwise (or when
    ``exact`` is False) the aligned-atom coupling bound, which can only
    overestimate.
    """
    if exact is None:
        exact = max(a.weights.shape[1], b.weights.shape[1]) <= EXACT_PRW_ATOMS
    if not exact:
        if a.weights.shape != b.weights.shape:
            raise ValueError("coupling bound needs aligned flows")
        return np.array([coupling_bound(a, b, k, b_param) for k in range(len(a.times))])
    return np.array([prw(a.measure(k), b.measure(k), b_param) for k in range(len(a.times))])


@dataclass
class PicardResult:
    ensemble: WeightedCurveEnsemble
    flow: MeasureFlow
    iterations: int
    residual: float
    residuals: list = field(default_factory=list)
    splits: int = 0


def _picard_window(problem, times, X0, W0, prob, start, tol, max_iter, b_param, depth, n_particles):
    if start == "frozen":
        guess = MeasureFlow.constant(times, DiscreteMeasure(X0, prob * W0))
    elif start == "zero":
        guess = MeasureFlow.zero(times, problem.dim)
    else:
        raise ValueError(f"unknown start {start!r}")
    ens = propagate(problem, guess, X0, prob, W0, n_particles)
    flow = evaluate_flow(ens)
    residuals = []
    for it in range(1, max_iter + 1):
        new = propagate(problem, flow, X0, prob, W0, n_particles)
        new_flow = evaluate_flow(new)
        res = float(flow_distance(flow, new_flow, b_param).max())
        residuals.append(res)
        ens, flow = new, new_flow
        log.debug("picard iteration %d: residual %.3e", it, res)
        if res < tol:
            return ens, flow, it, residuals, 0
        if it >= 3 and res > residuals[-2] and depth < MAX_SPLIT_DEPTH and len(times) > 2:
            log.info("picard residual increased; splitting the window at its midpoint")
            return _split(problem, times, X0, W0, prob, start, tol, max_iter, b_param, depth, n_particles)
    raise PicardError(f"no convergence in {max_iter} iterations (last residual {residuals[-1]:.3e})", residuals)


def _split(problem, times, X0, W0, prob, start, tol, max_iter, b_param, depth, n_particles):
    mid = len(times) // 2
    e1, f1, i1, r1, s1 = _picard_window(problem, times[: mid + 1], X0, W0, prob, start, tol, max_iter,
                                        b_param, depth + 1, n_particles)
    e2, f2, i2, r2, s2 = _picard_window(problem, times[mid:], e1.positions[-1], e1.weights[-1], prob, start,
                                        tol, max_iter, b_param, depth + 1, n_particles)
    ens = WeightedCurveEnsemble(times, np.concatenate([e1.positions, e2.positions[1:]]),
                                np.concatenate([e1.weights, e2.weights[1:]]), prob, n_particles)
    return ens, evaluate_flow(ens), max(i1, i2), r1 + r2, 1 + s1 + s2


def picard_solve(problem: BalanceProblem, N: int, steps: int | None = None, tol: float | None = None,
                 max_iter: int = 50, start: str = "frozen", b_param: float | None = None,
                 sampling: str = "quantize", seed: int = 0) -> PicardResult:
    """Fixed point of the curve map by Picard iteration.

    The residual of an iteration is the largest PRW distance over grid times
    between consecutive flows; the iteration stops once it drops below
    ``tol`` (default ``1e-6 |m0|``).
    """
    if N < 1:
        raise ValueError("N must be positive")
    steps = steps or min_steps(problem)
    tol = 1e-6 * problem.initial.mass if tol is None else tol
    b_param = problem.default_b() if b_param is None else b_param
    if sampling == "quantize":
        X0, prob = quantize_initial(problem.initial, N)
    elif sampling == "iid":
        X0, prob = sample_initial(problem.initial, N, seed)
    else:
        raise ValueError(f"unknown sampling {sampling!r}")
    W0 = np.full(prob.size, problem.initial.mass)
    times = np.linspace(0.0, problem.horizon, steps + 1)
    ens, flow, it, residuals, splits = _picard_window(problem, times, X0, W0, prob, start, tol, max_iter,
                                                     b_param, 0, N)
    return PicardResult(ens, flow, it, residuals[-1], residuals, splits)


# -- weak-form residuals ------------------------------------------------------

@dataclass(frozen=True)
class TestFunction:
    """Smooth compactly supported test function with its derivatives.

    ``value(t, X) -> (n,)``, ``grad(t, X) -> (n, d)``, ``dt(t, X) -> (n,)``.
    """

    __test__ = False  # keep pytest from collecting it

    value: object
    grad: object
    dt: object
    label: str = ""


def bump(center, radius: float, velocity=None) -> TestFunction:
    """``(1 - |y|^2/r^2)^4`` on the ball, with ``y = x - center - velocity t``.

    The profile is C^3, so the trapezoidal time quadrature of the weak form
    stays second order when an atom crosses the edge of the support.
    """
    c = np.atleast_1d(np.asarray(center, float))
    v = np.zeros_like(c) if velocity is None else np.atleast_1d(np.asarray(velocity, float))
    r2 = float(radius) ** 2

    def shift(t, X):
        return np.atleast_2d(X) - c - v * t

    def value(t, X):
        y = shift(t, X)
        s = np.maximum(1.0 - np.einsum("ij,ij->i", y, y) / r2, 0.0)
        return s ** 4

    def grad(t, X):
        y = shift(t, X)
        s = np.maximum(1.0 - np.einsum("ij,ij->i", y, y) / r2, 0.0)
        return (-8.0 * s ** 3 / r2)[:, None] * y

    def dt(t, X):
        return -grad(t, X) @ v

    return TestFunction(value, grad, dt, f"bump({c.tolist()}, {radius}, v={v.tolist()})")


def plateau(center, inner: float, outer: float) -> TestFunction:
    """Radial C^3 function equal to 1 within ``inner`` and 0 beyond ``outer``."""
    c = np.atleast_1d(np.asarray(center, float))
    w = outer - inner

    def profile(X):
        y = np.atleast_2d(X) - c
        r = np.linalg.norm(y, axis=1)
        return y, r, np.clip((outer - r) / w, 0.0, 1.0)

    def value(t, X):
        _, _, s = profile(X)
        return s ** 4 * (35.0 - 84.0 * s + 70.0 * s ** 2 - 20.0 * s ** 3)

    def grad(t, X):
        y, r, s = profile(X)
        dr = -140.0 * s ** 3 * (1.0 - s) ** 3 / w
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(r[:, None] > 0, y / r[:, None], 0.0)
        return dr[:, None] * unit

    def dt(t, X):
        return np.zeros(np.atleast_2d(X).shape[0])

    return TestFunction(value, grad, dt, f"plateau({c.tolist()}, {inner}, {outer})")


def weak_residual(problem: BalanceProblem, flow: MeasureFlow, test_functions) -> list[float]:
    """Largest weak-form defect over grid times, one value per test function.

    The time integral uses the trapezoidal rule on the flow's grid, with the
    oracles evaluated at the flow's own measure.
    """
    times = flow.times
    measures = flow.measures()
    m0 = problem.initial
    out = []
    for phi in test_functions:
        integrand = np.empty(len(times))
        lhs = np.empty(len(times))
        for k, (t, m) in enumerate(zip(times, measures)):
            if m.size == 0:
                integrand[k] = 0.0
                lhs[k] = 0.0
                continue
            X = m.points
            F = np.asarray(problem.velocity(t, X, m), float).reshape(X.shape)
            G = np.asarray(problem.growth(t, X, m), float).reshape(-1)
            val = phi.value(t, X)
            dens = phi.dt(t, X) + np.einsum("ij,ij->i", phi.grad(t, X), F) + val * G
            integrand[k] = float(dens @ m.weights)
            lhs[k] = float(val @ m.weights)
        start = float(phi.value(0.0, m0.points) @ m0.weights) if m0.size else 0.0
        cum = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(times) * (integrand[1:] + integrand[:-1]))])
        out.append(float(np.max(np.abs(lhs - start - cum))))
    return out


def ensemble_invariants(problem: BalanceProblem, ens: WeightedCurveEnsemble) -> dict:
    """Check the weight cap and the per-step Lipschitz increments of the curves."""
    C = mass_bound(problem, problem.horizon) * (1 + 1e-9)
    dt = np.diff(ens.times)
    dx = np.linalg.norm(np.diff(ens.positions, axis=0), axis=2)
    dw = np.abs(np.diff(ens.weights, axis=0))
    return {
        "initial_weight_ok": bool(np.allclose(ens.weights[0], problem.initial.mass, rtol=0, atol=1e-15)),
        "cap_ok": bool(np.all(ens.weights >= 0) and np.all(ens.weights <= C)),
        "x_lipschitz_ok": bool(np.all(dx <= problem.C_f * dt[:, None] * (1 + 1e-6) + 1e-15)),
        "w_lipschitz_ok": bool(np.all(dw <= problem.C_g * C * dt[:, None] * (1 + 1e-6) + 1e-15)),
    }

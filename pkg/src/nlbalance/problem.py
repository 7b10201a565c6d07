"""Balance-equation instances and the scenario catalog.

A problem bundles the velocity field ``f(t, x, m)``, the growth rate
``g(t, x, m)``, the initial measure, the compact box ``K`` and the horizon,
together with declared bounds.  Oracles are vectorized over points: they take
``X`` of shape ``(n, d)`` and the full current measure, and return arrays of
shape ``(n, d)`` (velocity) or ``(n,)`` (growth).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .measures import AugmentedDistribution, DiscreteMeasure, prw

Oracle = Callable[[float, np.ndarray, DiscreteMeasure], np.ndarray]


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ValueError("invalid box")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    def contains(self, X, tol: float = 0.0) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.all((X >= self.lower - tol) & (X <= self.upper + tol), axis=1)

    def distance(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        gap = np.maximum(self.lower - X, 0) + np.maximum(X - self.upper, 0)
        return np.linalg.norm(gap, axis=1)

    def sample(self, rng, n: int) -> np.ndarray:
        return self.lower + (self.upper - self.lower) * rng.random((n, self.dim))


@dataclass(frozen=True)
class BalanceProblem:
    name: str
    horizon: float
    initial: DiscreteMeasure
    domain: Box
    velocity: Oracle
    growth: Oracle
    C_f: float
    C_g: float
    C_Lf: float
    C_Lg: float
    depends_on_measure: bool = True
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.initial.size and self.initial.dim != self.domain.dim:
            raise ValueError("initial measure and domain dimensions differ")
        for c in ("C_f", "C_g", "C_Lf", "C_Lg"):
            if getattr(self, c) < 0:
                raise ValueError(f"{c} must be nonnegative")

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def T(self) -> float:
        return self.horizon

    def default_b(self) -> float:
        return self.domain.diameter + 1.0

    def with_params(self, **overrides) -> "BalanceProblem":
        if self.name not in _CATALOG:
            raise ValueError(f"{self.name!r} is not a catalog scenario")
        return scenario(self.name, **{**self.params, **overrides})


@dataclass(frozen=True)
class GrowthSplit:
    positive: Oracle
    negative: Oracle


def growth_split(problem: BalanceProblem) -> GrowthSplit:
    g = problem.growth

    def pos(t, X, m):
        return np.maximum(g(t, X, m), 0.0)

    def neg(t, X, m):
        return np.maximum(-g(t, X, m), 0.0)

    return GrowthSplit(pos, neg)


def f_R(problem: BalanceProblem, t: float, X, mu: AugmentedDistribution) -> np.ndarray:
    """Velocity seen by the conservation form: zero outside ``K``."""
    X = np.atleast_2d(X)
    out = np.asarray(problem.velocity(t, X, mu.base), dtype=float).reshape(X.shape)
    return np.where(problem.domain.contains(X)[:, None], out, 0.0)


def g_R(problem: BalanceProblem, t: float, X, mu: AugmentedDistribution):
    """``(g+, g-)`` seen by the conservation form: zero outside ``K``."""
    X = np.atleast_2d(X)
    g = np.asarray(problem.growth(t, X, mu.base), dtype=float).reshape(-1)
    g = np.where(problem.domain.contains(X), g, 0.0)
    return np.maximum(g, 0.0), np.maximum(-g, 0.0)


def mass_bound(problem: BalanceProblem, t: float) -> float:
    if t < 0:
        raise ValueError("t must be nonnegative")
    return problem.initial.mass * math.exp(problem.C_g * t)


def choose_R(problem: BalanceProblem) -> float:
    return 2.0 * mass_bound(problem, problem.horizon)


# -- invariant probes -------------------------------------------------------

def random_measure(rng, box: Box, max_atoms: int, max_mass: float) -> DiscreteMeasure:
    n = int(rng.integers(1, max_atoms + 1))
    w = rng.random(n)
    w *= rng.uniform(0, max_mass) / w.sum()
    return DiscreteMeasure(box.sample(rng, n), w)


def check_invariants(problem: BalanceProblem, probes: int = 200, seed: int = 0, slack: float = 0.05) -> dict:
    """Spot-check the declared bounds on randomized probes.

    Measures used in the m-slot have mass at most the a priori bound at the
    horizon.  Lipschitz quotients in ``m`` use the PRW distance with the
    default ``b``.
    """
    rng = np.random.default_rng(seed)
    K = problem.domain
    T = problem.horizon
    cap = mass_bound(problem, T)
    b = problem.default_b()
    report = {"support_in_K": bool(np.all(K.contains(problem.initial.points, 1e-12)))}
    sup_f = sup_g = lip_fx = lip_gx = lip_fm = lip_gm = 0.0
    outside = 0.0
    for _ in range(probes):
        t = rng.uniform(0, T)
        m = random_measure(rng, K, 5, cap)
        X = K.sample(rng, 8)
        F = problem.velocity(t, X, m)
        G = problem.growth(t, X, m)
        sup_f = max(sup_f, float(np.max(np.linalg.norm(F, axis=1))))
        sup_g = max(sup_g, float(np.max(np.abs(G))))
        Y = np.clip(X + rng.normal(scale=0.05, size=X.shape), K.lower, K.upper)
        dx = np.linalg.norm(X - Y, axis=1)
        ok = dx > 1e-9
        if np.any(ok):
            lip_fx = max(lip_fx, float(np.max(np.linalg.norm(F - problem.velocity(t, Y, m), axis=1)[ok] / dx[ok])))
            lip_gx = max(lip_gx, float(np.max(np.abs(G - problem.growth(t, Y, m))[ok] / dx[ok])))
        if problem.depends_on_measure:
            m2 = random_measure(rng, K, 5, cap)
            dm = prw(m, m2, b)
            if dm > 1e-9:
                lip_fm = max(lip_fm, float(np.max(np.linalg.norm(F - problem.velocity(t, X, m2), axis=1))) / dm)
                lip_gm = max(lip_gm, float(np.max(np.abs(G - problem.growth(t, X, m2)))) / dm)
        # points outside K but within distance 1
        Z = K.sample(rng, 8)
        direction = rng.normal(size=Z.shape)
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        Z = Z + direction * (K.diameter + rng.uniform(0.01, 1.0, size=(8, 1)))
        Z = Z[~K.contains(Z)]
        if Z.size:
            outside = max(outside, float(np.max(np.linalg.norm(problem.velocity(t, Z, m), axis=1))))
    tol = 1.0 + slack
    report.update(
        sup_f=sup_f, sup_g=sup_g, lip_f_x=lip_fx, lip_g_x=lip_gx, lip_f_m=lip_fm, lip_g_m=lip_gm,
        f_outside_K=outside,
        bounds_ok=bool(sup_f <= problem.C_f * (1 + 1e-12) + 1e-12 and sup_g <= problem.C_g * (1 + 1e-12) + 1e-12),
        lipschitz_ok=bool(max(lip_fx, lip_fm) <= problem.C_Lf * tol + 1e-12
                          and max(lip_gx, lip_gm) <= problem.C_Lg * tol + 1e-12),
        vanishing_ok=bool(outside == 0.0),
    )
    report["ok"] = bool(report["support_in_K"] and report["bounds_ok"] and report["lipschitz_ok"]
                        and report["vanishing_ok"])
    return report


# -- scenario catalog ---------------------------------------------------------

def _zeros_vec(t, X, m):
    return np.zeros_like(np.atleast_2d(X), dtype=float)


def smoothstep_cutoff(x, inner: float, outer: float):
    """C^1 radial cutoff: 1 for |x| <= inner, 0 for |x| >= outer."""
    r = np.abs(x)
    s = np.clip((outer - r) / (outer - inner), 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def _advection1d(T=1.0, speed=1.0, length=4.0, x0=0.0, mass=1.0):
    box = Box([0.0], [length])
    v = float(speed)

    def velocity(t, X, m):
        X = np.atleast_2d(X)
        return np.where(box.contains(X)[:, None], v, 0.0) * np.ones_like(X)

    def growth(t, X, m):
        return np.zeros(np.atleast_2d(X).shape[0])

    return dict(horizon=T, initial=DiscreteMeasure.dirac([x0], mass), domain=box,
                velocity=velocity, growth=growth, C_f=abs(v), C_g=0.0, C_Lf=1.0, C_Lg=1.0,
                depends_on_measure=False)


def _pure_growth(T=2.0, gamma=0.5, mass=1.0, x0=0.0):
    box = Box([-1.0], [1.0])
    gam = float(gamma)

    def growth(t, X, m):
        return np.full(np.atleast_2d(X).shape[0], gam)

    return dict(horizon=T, initial=DiscreteMeasure.dirac([x0], mass), domain=box,
                velocity=_zeros_vec, growth=growth, C_f=0.0, C_g=abs(gam), C_Lf=1.0, C_Lg=1.0,
                depends_on_measure=False)


def _logistic_growth(T=1.0, mass=0.5, x0=0.0):
    box = Box([-1.0], [1.0])

    def growth(t, X, m):
        return np.full(np.atleast_2d(X).shape[0], 1.0 - m.mass)

    cap = mass * math.exp(T)
    return dict(horizon=T, initial=DiscreteMeasure.dirac([x0], mass), domain=box,
                velocity=_zeros_vec, growth=growth, C_f=0.0, C_g=max(1.0, cap - 1.0), C_Lf=1.0, C_Lg=1.0)


def _attraction_opinion(T=1.0, kappa=0.5, sigma=1.5, clip=3.0, half_width=2.0, plateau=1.5, mass=1.0):
    box = Box([-half_width], [half_width])
    kap, sig, vmax = float(kappa), float(sigma), float(clip)

    def velocity(t, X, m):
        X = np.atleast_2d(X)
        if m.size == 0:
            return np.zeros_like(X, dtype=float)
        drift = m.weights @ m.points - m.mass * X  # int (y - x) m(dy)
        drift = np.clip(drift, -vmax, vmax)
        return smoothstep_cutoff(X, plateau, half_width) * drift

    def growth(t, X, m):
        return np.full(np.atleast_2d(X).shape[0], kap * (sig - m.mass))

    cap = mass * math.exp(kap * sig * T)
    C_g = kap * max(sig, cap - sig)
    # cutoff slope 1.5/(outer-inner) times the clip, plus the drift slope |m|
    C_Lf = 1.5 / (half_width - plateau) * vmax + cap + 1.0
    return dict(horizon=T, initial=DiscreteMeasure(np.array([[-1.0], [1.0]]), np.array([0.5, 0.5]) * mass),
                domain=box, velocity=velocity, growth=growth, C_f=vmax, C_g=C_g, C_Lf=C_Lf,
                C_Lg=max(kap, 1e-12), depends_on_measure=True)


_CATALOG = {
    "advection1d": _advection1d,
    "pure_growth": _pure_growth,
    "logistic_growth": _logistic_growth,
    "attraction_opinion": _attraction_opinion,
}

SCENARIOS = tuple(sorted(_CATALOG))

# keys consumed by the solvers and the CLI rather than by the model
SOLVER_KEYS = {"h", "N", "steps", "seed", "b", "R", "tol", "max_iter", "replicas", "h_list", "ref_N", "ref_steps"}


def scenario(name: str, **params) -> BalanceProblem:
    try:
        builder = _CATALOG[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}") from None
    try:
        kwargs = builder(**params)
    except TypeError as exc:
        raise ValueError(f"bad parameters for {name!r}: {exc}") from None
    return BalanceProblem(name=name, params=dict(params), **kwargs)


def closed_form_mass(problem: BalanceProblem, t: float) -> float | None:
    """Exact total mass at time ``t`` for catalog scenarios where it is known."""
    m0 = problem.initial.mass
    if problem.name in ("advection1d",):
        return m0
    if problem.name == "pure_growth":
        return m0 * math.exp(problem.params.get("gamma", 0.5) * t)
    if problem.name == "logistic_growth":
        return 1.0 / (1.0 + math.exp(-t) * (1.0 / m0 - 1.0))
    if problem.name == "attraction_opinion":
        kap = problem.params.get("kappa", 0.5)
        sig = problem.params.get("sigma", 1.5)
        if kap == 0:
            return m0
        # logistic in the mass: dM/dt = kap (sig - M) M
        return sig / (1.0 + (sig / m0 - 1.0) * math.exp(-kap * sig * t))
    return None


def closed_form_measure(problem: BalanceProblem, t: float) -> DiscreteMeasure | None:
    """Exact solution measure for catalog scenarios with a closed form."""
    if problem.name == "advection1d":
        v = problem.params.get("speed", 1.0)
        pts = problem.initial.points + v * t
        # mass stops where the field vanishes, at the upper face of K
        pts = np.minimum(pts, problem.domain.upper) if v > 0 else np.maximum(pts, problem.domain.lower)
        return DiscreteMeasure(pts, problem.initial.weights)
    if problem.name in ("pure_growth", "logistic_growth"):
        return problem.initial.scaled(closed_form_mass(problem, t) / problem.initial.mass)
    return None


def load_scenario_file(path) -> tuple[BalanceProblem, dict]:
    """Read ``{"scenario": name, "overrides": {...}}``; solver keys are returned separately."""
    data = json.loads(Path(path).read_text())
    return parse_scenario_spec(data)


def parse_scenario_spec(data: dict) -> tuple[BalanceProblem, dict]:
    if "scenario" not in data:
        raise ValueError("scenario file needs a 'scenario' field")
    overrides = dict(data.get("overrides", {}))
    solver = {k: overrides.pop(k) for k in list(overrides) if k in SOLVER_KEYS}
    return scenario(data["scenario"], **overrides), solver

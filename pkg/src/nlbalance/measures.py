"""Finite atomic measures and the PRW distance between them.

The PRW distance between two nonnegative measures of possibly different mass
charges ``b`` per unit of created or destroyed mass and the ground distance
for transported mass.  Two independent routes are provided:

* :func:`prw_direct` solves the sub-measure program as one transportation
  problem with a creation source and a destruction sink;
* :func:`prw_augmented` appends a remote point ``STAR`` carrying the missing
  mass up to a common total ``R`` and computes ``R`` times the 1-Wasserstein
  distance of the normalized extensions under the truncated metric
  :func:`rho_star`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from ._netsimplex import transport

MERGE_TOL = 1e-12
STAR_INDEX = -1


class _Star:
    """The remote point.  A singleton that compares equal only to itself."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "STAR"

    def __reduce__(self):
        return (_Star, ())


STAR = _Star()


def is_star(p) -> bool:
    return p is STAR


def _merge_atoms(points: np.ndarray, weights: np.ndarray):
    keep = weights > 0
    points, weights = points[keep], weights[keep]
    n = points.shape[0]
    if n > 1:
        # exact duplicates first (cheap); the radius search then sees distinct points only
        points, inverse = np.unique(points, axis=0, return_inverse=True)
        weights = np.bincount(inverse.reshape(-1), weights=weights, minlength=points.shape[0])
        n = points.shape[0]
    if n > 1:
        pairs = cKDTree(points).query_pairs(MERGE_TOL, output_type="ndarray")
        if len(pairs):
            graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
            n_comp, label = connected_components(graph, directed=False)
            order = np.lexsort(points.T[::-1])
            rep = np.full(n_comp, -1)
            for i in order:  # lexicographically smallest member represents the cluster
                if rep[label[i]] < 0:
                    rep[label[i]] = i
            points = points[rep]
            weights = np.bincount(label, weights=weights, minlength=n_comp)
        order = np.lexsort(points.T[::-1])
        points, weights = points[order], weights[order]
    return points, weights


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Finite nonnegative measure ``sum_i weights[i] * delta(points[i])``.

    Atoms with zero weight are dropped, atoms closer than ``MERGE_TOL`` are
    merged, and the remaining atoms are stored in lexicographic order so that
    equal measures have identical representations.
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if pts.ndim == 1:
            pts = pts.reshape(w.size, -1) if w.size else pts.reshape(0, max(pts.size, 1))
        if pts.ndim != 2 or pts.shape[0] != w.size:
            raise ValueError(f"points {pts.shape} and weights {w.shape} disagree")
        if pts.shape[1] < 1:
            raise ValueError("dimension must be positive")
        if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(w)):
            raise ValueError("points and weights must be finite")
        if np.any(w < 0):
            raise ValueError("negative weight")
        pts, w = _merge_atoms(pts, w)
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def empty(cls, dim: int) -> "DiscreteMeasure":
        return cls(np.zeros((0, dim)), np.zeros(0))

    @classmethod
    def dirac(cls, point, weight: float = 1.0) -> "DiscreteMeasure":
        p = np.atleast_1d(np.asarray(point, dtype=np.float64))
        return cls(p.reshape(1, -1), np.array([weight]))

    @classmethod
    def from_atoms(cls, atoms: Iterable[tuple], dim: int | None = None) -> "DiscreteMeasure":
        atoms = list(atoms)
        if not atoms:
            if dim is None:
                raise ValueError("dim is required for an empty atom list")
            return cls.empty(dim)
        pts = np.array([np.atleast_1d(np.asarray(p, dtype=np.float64)) for p, _ in atoms])
        w = np.array([float(wt) for _, wt in atoms])
        if dim is not None and pts.shape[1] != dim:
            raise ValueError(f"atoms have dimension {pts.shape[1]}, expected {dim}")
        return cls(pts, w)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.weights.size

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def scaled(self, c: float) -> "DiscreteMeasure":
        return DiscreteMeasure(self.points, self.weights * c)

    def integrate(self, func) -> float:
        """``int func dm`` for a vectorized ``func`` mapping (n, d) to (n,)."""
        if self.size == 0:
            return 0.0
        return float(np.dot(np.asarray(func(self.points), dtype=float), self.weights))

    def atoms(self):
        return [(p.copy(), float(w)) for p, w in zip(self.points, self.weights)]

    def __add__(self, other: "DiscreteMeasure") -> "DiscreteMeasure":
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        return DiscreteMeasure(np.vstack([self.points, other.points]),
                               np.concatenate([self.weights, other.weights]))

    def __eq__(self, other):
        if not isinstance(other, DiscreteMeasure):
            return NotImplemented
        return (self.dim == other.dim and self.size == other.size
                and np.array_equal(self.points, other.points)
                and np.array_equal(self.weights, other.weights))

    __hash__ = None

    def __repr__(self):
        return f"DiscreteMeasure(dim={self.dim}, atoms={self.size}, mass={self.mass:.6g})"


@dataclass(frozen=True)
class AugmentedDistribution:
    """Extension ``m + (R - |m|) delta(STAR)`` of a measure to total mass ``R``."""

    base: DiscreteMeasure
    star_mass: float
    total: float

    def __post_init__(self):
        if self.total <= 0:
            raise ValueError("total must be positive")
        if self.star_mass < 0:
            raise ValueError("star mass must be nonnegative")
        if abs(self.base.mass + self.star_mass - self.total) > 1e-12 * self.total:
            raise ValueError("base mass + star mass must equal the total")

    def probabilities(self):
        """Normalized weights of the base atoms followed by the star weight."""
        return self.base.weights / self.total, self.star_mass / self.total


@dataclass(frozen=True)
class TransportPlan:
    """Sparse plan; ``STAR_INDEX`` marks the remote point on either side."""

    sources: np.ndarray
    targets: np.ndarray
    masses: np.ndarray

    def entries(self):
        return list(zip(self.sources.tolist(), self.targets.tolist(), self.masses.tolist()))


def augment(m: DiscreteMeasure, R: float) -> AugmentedDistribution:
    if not R > m.mass:
        raise ValueError(f"R = {R!r} must exceed the mass {m.mass!r}")
    return AugmentedDistribution(m, max(R - m.mass, 0.0), float(R))


def rho_star(a, b, b_param: float) -> float:
    """Truncated metric on the space extended by ``STAR``."""
    sa, sb = is_star(a), is_star(b)
    if sa and sb:
        return 0.0
    if sa or sb:
        return float(b_param)
    d = float(np.linalg.norm(np.atleast_1d(np.asarray(a, float)) - np.atleast_1d(np.asarray(b, float))))
    return min(d, 2.0 * b_param)


def pairwise_distance(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - Y[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def rho_star_matrix(X: np.ndarray, Y: np.ndarray, b_param: float,
                    star_x: bool = True, star_y: bool = True) -> np.ndarray:
    """Cost matrix of :func:`rho_star` between atoms ``X`` (+ star) and ``Y`` (+ star).

    When ``star_x`` (``star_y``) is set the remote point is appended as the last
    row (column).
    """
    C = np.minimum(pairwise_distance(X, Y), 2.0 * b_param)
    if star_y:
        C = np.hstack([C, np.full((C.shape[0], 1), float(b_param))])
    if star_x:
        row = np.full((1, C.shape[1]), float(b_param))
        if star_y:
            row[0, -1] = 0.0
        C = np.vstack([C, row])
    return C


def _plan_from_dense(P: np.ndarray, n_src: int, n_tgt: int, star_src: bool, star_tgt: bool) -> TransportPlan:
    i, j = np.nonzero(P > 0)
    masses = P[i, j]
    src = np.where(star_src & (i == n_src), STAR_INDEX, i)
    tgt = np.where(star_tgt & (j == n_tgt), STAR_INDEX, j)
    return TransportPlan(src.astype(np.int64), tgt.astype(np.int64), masses)


def wasserstein1(mu1: AugmentedDistribution, mu2: AugmentedDistribution, b_param: float):
    """1-Wasserstein distance between the normalized extensions under ``rho_star``.

    Returns ``(value, plan)``; the plan is expressed in normalized (probability)
    mass so the returned value equals ``sum(plan.masses * cost)``.
    """
    if b_param <= 0:
        raise ValueError("b must be positive")
    if abs(mu1.total - mu2.total) > 1e-12 * max(mu1.total, mu2.total):
        raise ValueError(f"totals differ: {mu1.total!r} vs {mu2.total!r}")
    if mu1.base.size and mu2.base.size and mu1.base.dim != mu2.base.dim:
        raise ValueError("dimension mismatch")
    p1, s1 = mu1.probabilities()
    p2, s2 = mu2.probabilities()
    a = np.concatenate([p1, [s1]])
    c = np.concatenate([p2, [s2]])
    # renormalize so that rounding in the two totals cannot unbalance the LP
    a /= a.sum()
    c /= c.sum()
    dim = mu1.base.dim if mu1.base.size else mu2.base.dim
    X = mu1.base.points.reshape(-1, dim)
    Y = mu2.base.points.reshape(-1, dim)
    C = rho_star_matrix(X, Y, b_param)
    P, value = transport(a, c, C)
    return value, _plan_from_dense(P, X.shape[0], Y.shape[0], True, True)


def prw_direct(m1: DiscreteMeasure, m2: DiscreteMeasure, b_param: float) -> float:
    """PRW distance from the sub-measure program, as one transportation LP.

    Sources are the atoms of ``m1`` and a creation node holding ``|m2|``;
    targets are the atoms of ``m2`` and a destruction node absorbing ``|m1|``.
    Destroying or creating a unit costs ``b``; the creation-to-destruction arc
    is free and carries the slack.  Ground costs are the plain Euclidean
    distances; the optimum never transports farther than ``2b``.
    """
    if b_param <= 0:
        raise ValueError("b must be positive")
    if m1.size == 0 and m2.size == 0:
        return 0.0
    if m1.size and m2.size and m1.dim != m2.dim:
        raise ValueError("dimension mismatch")
    dim = m1.dim if m1.size else m2.dim
    X = m1.points.reshape(-1, dim)
    Y = m2.points.reshape(-1, dim)
    C = pairwise_distance(X, Y)
    C = np.hstack([C, np.full((X.shape[0], 1), float(b_param))])
    C = np.vstack([C, np.full((1, C.shape[1]), float(b_param))])
    C[-1, -1] = 0.0
    supply = np.concatenate([m1.weights, [m2.mass]])
    demand = np.concatenate([m2.weights, [m1.mass]])
    _, value = transport(supply, demand, C)
    return value


def prw_augmented(m1: DiscreteMeasure, m2: DiscreteMeasure, b_param: float, R: float | None = None) -> float:
    """PRW distance as ``R * W1`` of the extensions to total mass ``R``.

    ``R`` defaults to ``2 * max(|m1|, |m2|)`` (or 1 for two empty measures).
    """
    if R is None:
        R = 2.0 * max(m1.mass, m2.mass) or 1.0
    if m1.size == 0 and m2.size == 0:
        return 0.0
    value, _ = wasserstein1(augment(m1, R), augment(m2, R), b_param)
    return float(R) * value


def prw(m1: DiscreteMeasure, m2: DiscreteMeasure, b_param: float) -> float:
    """Default PRW evaluation used by the solvers and the harness."""
    return prw_direct(m1, m2, b_param)


def optimal_plan_augmented(m1: DiscreteMeasure, m2: DiscreteMeasure, b_param: float, R: float):
    """Optimal plan between ``m1/R`` and ``m2/R`` extended by the remote point."""
    return wasserstein1(augment(m1, R), augment(m2, R), b_param)


# -- serialization -----------------------------------------------------------

def measure_to_records(m: DiscreteMeasure) -> list[dict]:
    return [{"point": [float(v) for v in p], "weight": float(w)} for p, w in zip(m.points, m.weights)]


def measure_from_records(records: Sequence[dict], dim: int | None = None) -> DiscreteMeasure:
    return DiscreteMeasure.from_atoms(((r["point"], r["weight"]) for r in records), dim=dim)


def save_measure(m: DiscreteMeasure, path) -> None:
    Path(path).write_text(json.dumps(measure_to_records(m), indent=1) + "\n")


def load_measure(path, dim: int | None = None) -> DiscreteMeasure:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        dim = data.get("dim", dim)
        data = data["atoms"]
    return measure_from_records(data, dim=dim)

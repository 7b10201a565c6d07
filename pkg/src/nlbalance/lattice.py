"""Finite state sets and the Kolmogorov rate matrices of the lattice scheme.

Weight vectors are plain float arrays indexed by lattice points.  When the
remote point is tracked it occupies the last slot (index ``n``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.spatial import ConvexHull, cKDTree

from .measures import DiscreteMeasure, pairwise_distance
from .problem import BalanceProblem, Box, mass_bound

HEADROOM_TOL = 1e-9
FLOAT_SLACK = 1e-12


class LatticeError(ValueError):
    pass


class HeadroomError(RuntimeError):
    """Total lattice mass reached the extension constant ``R``."""


def _max_pairwise(points: np.ndarray) -> float:
    if points.shape[1] == 1:
        return float(points.max() - points.min())
    cand = points
    if points.shape[0] > 64:
        try:
            cand = points[ConvexHull(points).vertices]
        except Exception:  # degenerate (flat) point clouds
            cand = points
    best = 0.0
    for start in range(0, cand.shape[0], 512):
        best = max(best, float(pairwise_distance(cand[start:start + 512], cand).max()))
    return best


class Lattice:
    """Ordered finite set of points with index lookup.

    Points are kept in lexicographic order.  Lattices produced by
    :func:`build_lattice` also carry the spacing ``h``, their integer
    coordinates and the box ``K`` they fatten, which the upwind builder needs.
    """

    def __init__(self, points, spacing: float | None = None, box: Box | None = None, _int_coords=None):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.ndim != 2:
            raise LatticeError("points must be an (n, d) array")
        order = np.lexsort(pts.T[::-1])
        pts = pts[order]
        if pts.shape[0] < 2:
            raise LatticeError("a lattice needs at least two points (fineness undefined otherwise)")
        self.points = pts
        self.points.setflags(write=False)
        self.spacing = spacing
        self.box = box
        dists, _ = cKDTree(pts).query(pts, k=2)
        self.fineness = float(dists[:, 1].min())
        if self.fineness <= 0:
            raise LatticeError("duplicate lattice points")
        self.diameter = _max_pairwise(pts)
        self._tree = None
        if _int_coords is not None:
            ic = np.asarray(_int_coords, dtype=np.int64)[order]
            self.int_coords = ic
            self._offset = ic.min(axis=0)
            shape = tuple(ic.max(axis=0) - self._offset + 1)
            grid = np.full(shape, -1, dtype=np.int64)
            grid[tuple((ic - self._offset).T)] = np.arange(pts.shape[0])
            self._grid = grid
        else:
            self.int_coords = None
            self._grid = None
        if box is not None:
            tol = 1e-12 * (spacing or 1.0)
            self.in_K = box.contains(pts, tol)
        else:
            self.in_K = np.ones(pts.shape[0], dtype=bool)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"Lattice(n={self.n}, dim={self.dim}, h={self.spacing})"

    def lookup_int(self, coords: np.ndarray) -> np.ndarray:
        """Indices of integer grid coordinates; -1 where absent."""
        if self._grid is None:
            raise LatticeError("integer lookup requires a grid lattice")
        c = np.atleast_2d(coords) - self._offset
        ok = np.all((c >= 0) & (c < np.array(self._grid.shape)), axis=1)
        out = np.full(c.shape[0], -1, dtype=np.int64)
        if np.any(ok):
            out[ok] = self._grid[tuple(c[ok].T)]
        return out

    def locate(self, X, tol: float = 1e-9) -> np.ndarray:
        """Index of the lattice point equal to each row of ``X`` (within ``tol``); -1 otherwise."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self._tree is None:
            self._tree = cKDTree(self.points)
        d, idx = self._tree.query(X)
        return np.where(d <= tol * max(1.0, self.fineness), idx, -1)

    def nearest(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Nearest lattice point of each row; ties go to the lexicographically smallest."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self._tree is None:
            self._tree = cKDTree(self.points)
        k = min(2 ** self.dim + 1, self.n)
        d, idx = self._tree.query(X, k=k)
        d = np.atleast_2d(d).reshape(X.shape[0], -1)
        idx = np.atleast_2d(idx).reshape(X.shape[0], -1)
        best = d[:, :1]
        tied = d <= best + 1e-12 * max(self.fineness, 1.0)
        # indices are in lexicographic order, so the smallest tied index wins
        choice = np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1)
        return choice, d[:, 0]


def build_lattice(K: Box, h: float) -> Lattice:
    """All points of ``h Z^d`` within closed distance ``h`` of ``K``."""
    if not h > 0:
        raise LatticeError("h must be positive")
    lo = np.floor((K.lower - h) / h - 1e-9).astype(np.int64)
    hi = np.ceil((K.upper + h) / h + 1e-9).astype(np.int64)
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, K.dim)
    pts = grid * h
    keep = K.distance(pts) <= h * (1 + 1e-12)
    return Lattice(pts[keep], spacing=h, box=K, _int_coords=grid[keep])


def lattice_weights_valid(beta) -> bool:
    return bool(np.all(np.asarray(beta) >= 0) and np.all(np.isfinite(beta)))


def to_measure(beta, lattice: Lattice) -> DiscreteMeasure:
    """The measure ``sum_x beta_x delta_x`` (a trailing star entry is ignored)."""
    beta = np.asarray(beta, dtype=float)[: lattice.n]
    nz = beta > 0
    return DiscreteMeasure(lattice.points[nz], beta[nz])


def from_measure(m: DiscreteMeasure, lattice: Lattice, tol: float = 1e-9) -> np.ndarray:
    """Inverse of :func:`to_measure` for measures supported on lattice points."""
    beta = np.zeros(lattice.n)
    if m.size == 0:
        return beta
    idx = lattice.locate(m.points, tol)
    if np.any(idx < 0):
        raise LatticeError("measure has atoms off the lattice")
    np.add.at(beta, idx, m.weights)
    return beta


@dataclass(frozen=True)
class RateMatrix:
    """Sparse rate matrix over lattice indices, optionally with the star last."""

    matrix: sp.csr_matrix
    kind: str
    has_star: bool = False

    def __post_init__(self):
        if self.kind not in ("kolmogorov", "diagonal"):
            raise ValueError(f"unknown kind {self.kind!r}")

    @property
    def shape(self):
        return self.matrix.shape

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def min_offdiagonal(self) -> float:
        coo = self.matrix.tocoo()
        off = coo.row != coo.col
        return float(coo.data[off].min()) if np.any(off) else 0.0

    def check(self, tol: float = 1e-12) -> dict:
        """Structural invariants of the declared ``kind``."""
        coo = self.matrix.tocoo()
        off = coo.row != coo.col
        if self.kind == "diagonal":
            ok = bool(np.all(coo.data[off] == 0))
            return {"ok": ok, "max_offdiagonal": float(np.abs(coo.data[off]).max()) if np.any(off) else 0.0}
        rs = self.row_sums()
        scale = np.maximum(1.0, np.asarray(abs(self.matrix).sum(axis=1)).ravel())
        worst_rs = float(np.max(np.abs(rs))) if rs.size else 0.0
        worst_rel = float(np.max(np.abs(rs) / scale)) if rs.size else 0.0
        min_off = self.min_offdiagonal()
        return {"ok": bool(min_off >= 0 and worst_rel <= tol), "min_offdiagonal": min_off,
                "max_abs_row_sum": worst_rs, "max_rel_row_sum": worst_rel}

    def triplets(self):
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order], coo.col[order], coo.data[order]

    def to_triplet_text(self, star_label: str = "*") -> str:
        n = self.matrix.shape[0]
        lines = ["row,col,rate"]
        for r, c, v in zip(*self.triplets()):
            rs = star_label if self.has_star and r == n - 1 else str(r)
            cs = star_label if self.has_star and c == n - 1 else str(c)
            lines.append(f"{rs},{cs},{float(v)!r}")
        return "\n".join(lines) + "\n"


def _kolmogorov_from_offdiag(rows, cols, rates, n) -> sp.csr_matrix:
    """Assemble a Kolmogorov matrix from off-diagonal rates, diagonal balancing each row."""
    off = sp.coo_matrix((rates, (rows, cols)), shape=(n, n)).tocsr()
    off.sum_duplicates()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sp.diags(diag, format="csr")).tocsr()


MovementBuilder = Callable[[float, np.ndarray], sp.csr_matrix]


def upwind_epsilon(h: float, d: int, C_f: float) -> float:
    return max(h, d ** 0.25 * math.sqrt(C_f) * math.sqrt(h))


def upwind_matrix(problem: BalanceProblem, lattice: Lattice, t: float, beta, m: DiscreteMeasure | None = None) -> RateMatrix:
    """Upwind generator: rate ``|f_i|/h`` from ``x`` in ``K`` to ``x + h e_i sgn(f_i)``."""
    if lattice.spacing is None or lattice.int_coords is None:
        raise LatticeError("upwind matrix needs a lattice from build_lattice")
    h = lattice.spacing
    n, d = lattice.n, lattice.dim
    if m is None:
        m = to_measure(beta, lattice)
    rows_K = np.flatnonzero(lattice.in_K)
    F = np.asarray(problem.velocity(t, lattice.points[rows_K], m), dtype=float).reshape(rows_K.size, d)
    rows, cols, rates = [], [], []
    for i in range(d):
        s = np.sign(F[:, i]).astype(np.int64)
        nz = s != 0
        if not np.any(nz):
            continue
        src = rows_K[nz]
        tgt_coords = lattice.int_coords[src].copy()
        tgt_coords[:, i] += s[nz]
        tgt = lattice.lookup_int(tgt_coords)
        if np.any(tgt < 0):
            raise LatticeError("upwind target outside the lattice")
        rows.append(src)
        cols.append(tgt)
        rates.append(np.abs(F[nz, i]) / h)
    if rows:
        rows, cols, rates = np.concatenate(rows), np.concatenate(cols), np.concatenate(rates)
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
        rates = np.zeros(0)
    return RateMatrix(_kolmogorov_from_offdiag(rows, cols, rates, n), "kolmogorov")


def upwind_builder(problem: BalanceProblem, lattice: Lattice) -> MovementBuilder:
    def build(t, beta, m=None):
        return upwind_matrix(problem, lattice, t, beta, m).matrix
    return build


def fixed_builder(Q) -> MovementBuilder:
    """Movement builder returning a constant matrix (for hand-made chains)."""
    Q = sp.csr_matrix(Q)

    def build(t, beta, m=None):
        return Q
    return build


def growth_values(problem: BalanceProblem, lattice: Lattice, t: float, beta, m: DiscreteMeasure | None = None) -> np.ndarray:
    if m is None:
        m = to_measure(beta, lattice)
    return np.asarray(problem.growth(t, lattice.points, m), dtype=float).reshape(lattice.n)


def growth_matrix(problem: BalanceProblem, lattice: Lattice, t: float, beta) -> RateMatrix:
    return RateMatrix(sp.diags(growth_values(problem, lattice, t, beta), format="csr"), "diagonal")


def check_headroom(mass: float, R: float) -> None:
    if mass >= R * (1.0 - HEADROOM_TOL):
        raise HeadroomError(f"lattice mass {mass!r} exhausted the headroom R = {R!r}")


def extended_matrix(problem: BalanceProblem, lattice: Lattice, t: float, beta, R: float,
                    movement: MovementBuilder | None = None) -> RateMatrix:
    """Conservation-form generator on the lattice plus the remote point (last index)."""
    beta = np.asarray(beta, dtype=float)[: lattice.n]
    mass = float(beta.sum())
    check_headroom(mass, R)
    m = to_measure(beta, lattice)
    Q = (movement or upwind_builder(problem, lattice))(t, beta, m)
    g = growth_values(problem, lattice, t, beta, m)
    return RateMatrix(_extended_from_parts(Q, g, beta, R), "kolmogorov", has_star=True)


def _extended_from_parts(Q: sp.csr_matrix, g: np.ndarray, beta: np.ndarray, R: float) -> sp.csr_matrix:
    n = Q.shape[0]
    gp, gm = np.maximum(g, 0.0), np.maximum(-g, 0.0)
    coo = Q.tocoo()
    off = coo.row != coo.col
    star = n
    birth = gp * beta / (R - beta.sum())
    rows = np.concatenate([coo.row[off], np.arange(n), np.full(n, star)])
    cols = np.concatenate([coo.col[off], np.full(n, star), np.arange(n)])
    rates = np.concatenate([coo.data[off], gm, birth])
    keep = rates != 0
    return _kolmogorov_from_offdiag(rows[keep], cols[keep], rates[keep], n + 1)


@dataclass
class QSReport:
    epsilon: float
    probes: int
    qs1_max_distance: float
    qs2_max_error: float
    qs3_max_sum: float
    qs3_upwind_bound: float | None
    kolmogorov_ok: bool

    # comparisons carry a relative slack of FLOAT_SLACK: the upwind second
    # moment meets its bound with equality when |f| reaches C_f

    @property
    def qs1_ok(self) -> bool:
        return self.qs1_max_distance <= self.epsilon * (1 + FLOAT_SLACK)

    @property
    def qs2_ok(self) -> bool:
        return self.qs2_max_error <= self.epsilon * (1 + FLOAT_SLACK)

    @property
    def qs3_ok(self) -> bool:
        return self.qs3_max_sum <= self.epsilon ** 2 * (1 + FLOAT_SLACK)

    @property
    def passed(self) -> bool:
        return self.qs1_ok and self.qs2_ok and self.qs3_ok and self.kolmogorov_ok

    def as_dict(self) -> dict:
        return {"epsilon": self.epsilon, "probes": self.probes, "qs1_max_distance": self.qs1_max_distance,
                "qs2_max_error": self.qs2_max_error, "qs3_max_sum": self.qs3_max_sum,
                "qs3_upwind_bound": self.qs3_upwind_bound, "kolmogorov_ok": self.kolmogorov_ok,
                "qs1_ok": self.qs1_ok, "qs2_ok": self.qs2_ok, "qs3_ok": self.qs3_ok, "passed": self.passed}


def random_lattice_weights(rng, lattice: Lattice, max_mass: float, max_support: int | None = None) -> np.ndarray:
    beta = np.zeros(lattice.n)
    k = int(rng.integers(1, (max_support or lattice.n) + 1))
    idx = rng.choice(lattice.n, size=min(k, lattice.n), replace=False)
    w = rng.random(idx.size)
    beta[idx] = w * (rng.uniform(0.0, max_mass) / w.sum())
    return beta


def check_qs(problem: BalanceProblem, lattice: Lattice, rate_builder: MovementBuilder | None = None,
             epsilon: float | None = None, probes: int = 10_000, seed: int = 0) -> QSReport:
    """Randomized check of the approximation conditions.

    Each probe draws a time, a weight vector of mass at most the a priori bound
    and a point of ``K``.  The point is tested for a lattice neighbour within
    ``epsilon``; the drift and second-moment conditions are evaluated on every
    lattice row of the matrix built for that ``(t, beta)``.
    """
    rng = np.random.default_rng(seed)
    builder = rate_builder or upwind_builder(problem, lattice)
    if epsilon is None:
        if lattice.spacing is None:
            raise ValueError("epsilon is required for non-grid lattices")
        epsilon = upwind_epsilon(lattice.spacing, lattice.dim, problem.C_f)
    cap = mass_bound(problem, problem.horizon)
    X = lattice.points
    qs1 = qs2 = qs3 = 0.0
    kol_ok = True
    for _ in range(probes):
        t = rng.uniform(0.0, problem.horizon)
        beta = random_lattice_weights(rng, lattice, cap, max_support=8)
        m = to_measure(beta, lattice)
        Q = builder(t, beta, m)
        rm = RateMatrix(Q, "kolmogorov")
        kol_ok &= rm.check()["ok"]
        x = problem.domain.sample(rng, 1)
        qs1 = max(qs1, float(lattice.nearest(x)[1][0]))
        coo = Q.tocoo()
        off = coo.row != coo.col
        r, c, q = coo.row[off], coo.col[off], coo.data[off]
        disp = X[c] - X[r]
        drift = np.zeros_like(X)
        np.add.at(drift, r, disp * q[:, None])
        second = np.zeros(lattice.n)
        np.add.at(second, r, np.einsum("ij,ij->i", disp, disp) * q)
        F = np.asarray(problem.velocity(t, X, m), dtype=float).reshape(X.shape)
        qs2 = max(qs2, float(np.max(np.linalg.norm(F - drift, axis=1))))
        qs3 = max(qs3, float(second.max()))
    bound = problem.C_f * math.sqrt(lattice.dim) * lattice.spacing if lattice.spacing else None
    return QSReport(float(epsilon), probes, qs1, qs2, qs3, bound, bool(kol_ok))


def project_initial(m0: DiscreteMeasure, lattice: Lattice) -> np.ndarray:
    """Move each atom's mass to its nearest lattice point (ties to the lexicographically smallest)."""
    beta = np.zeros(lattice.n)
    if m0.size == 0:
        return beta
    idx, _ = lattice.nearest(m0.points)
    np.add.at(beta, idx, m0.weights)
    return beta

"""Primal network simplex for dense transportation problems.

Costs are quantized to int64 so that reduced-cost signs are exact; flows stay
in floating point. The basis is kept strongly feasible (Cunningham's leaving
rule), which rules out cycling on degenerate instances.
"""
from __future__ import annotations

import numba
import numpy as np

COST_RESOLUTION = 1e-12
_INT_BUDGET = 2.0**61


@numba.njit(cache=True)
def _refresh_tree(parent, pedge, up, cost_edge, depth, pi, root, order_buf):
    """Recompute depth and potentials from parent pointers (O(nodes))."""
    n_nodes = parent.shape[0]
    known = np.zeros(n_nodes, dtype=np.bool_)
    known[root] = True
    depth[root] = 0
    pi[root] = 0
    for v in range(n_nodes):
        if known[v]:
            continue
        top = 0
        u = v
        while not known[u]:
            order_buf[top] = u
            top += 1
            u = parent[u]
        while top > 0:
            top -= 1
            u = order_buf[top]
            p = parent[u]
            c = cost_edge[u]
            # basic arcs have zero reduced cost: pi[tail] - pi[head] = c
            if up[u]:
                pi[u] = pi[p] + c
            else:
                pi[u] = pi[p] - c
            depth[u] = depth[p] + 1
            known[u] = True


@numba.njit(cache=True)
def _solve(a, b, C, art_cost, max_iter):
    n = a.shape[0]
    m = b.shape[0]
    n_nodes = n + m + 1
    root = n + m
    flow = np.zeros(n * m, dtype=np.float64)
    art_flow = np.zeros(n_nodes, dtype=np.float64)
    parent = np.full(n_nodes, -1, dtype=np.int64)
    pedge = np.full(n_nodes, -1, dtype=np.int64)  # -1: artificial arc to root
    up = np.zeros(n_nodes, dtype=np.bool_)
    cost_edge = np.zeros(n_nodes, dtype=np.int64)
    depth = np.zeros(n_nodes, dtype=np.int64)
    pi = np.zeros(n_nodes, dtype=np.int64)
    buf = np.zeros(n_nodes, dtype=np.int64)
    in_tree = np.zeros(n * m, dtype=np.bool_)

    for i in range(n):
        parent[i] = root
        up[i] = True
        cost_edge[i] = art_cost
        art_flow[i] = a[i]
    for j in range(m):
        parent[n + j] = root
        up[n + j] = False
        cost_edge[n + j] = art_cost
        art_flow[n + j] = b[j]
    _refresh_tree(parent, pedge, up, cost_edge, depth, pi, root, buf)

    total = 0.0
    for i in range(n):
        total += a[i]
    tie_tol = 1e-14 * max(total, 1e-300)

    n_arcs = n * m
    block = max(int(np.sqrt(n_arcs)), 16)
    block = min(block, n_arcs)
    cursor = 0
    path_p = np.zeros(n_nodes, dtype=np.int64)
    path_q = np.zeros(n_nodes, dtype=np.int64)
    it = 0
    status = 0
    while True:
        if it >= max_iter:
            status = 1
            break
        # block pricing
        best_rc = 0
        best = -1
        scanned = 0
        while scanned < n_arcs:
            stop = min(scanned + block, n_arcs)
            for s in range(scanned, stop):
                k = cursor + s
                if k >= n_arcs:
                    k -= n_arcs
                if in_tree[k]:
                    continue
                i = k // m
                j = k - i * m
                rc = C[i, j] - pi[i] + pi[n + j]
                if rc < best_rc:
                    best_rc = rc
                    best = k
            scanned = stop
            if best >= 0:
                break
        if best < 0:
            break
        cursor = best + 1
        if cursor >= n_arcs:
            cursor = 0
        it += 1

        p = best // m
        q = n + (best - p * m)
        # tree paths from p and q up to their common ancestor
        lp = 0
        lq = 0
        u = p
        v = q
        while depth[u] > depth[v]:
            path_p[lp] = u
            lp += 1
            u = parent[u]
        while depth[v] > depth[u]:
            path_q[lq] = v
            lq += 1
            v = parent[v]
        while u != v:
            path_p[lp] = u
            lp += 1
            u = parent[u]
            path_q[lq] = v
            lq += 1
            v = parent[v]

        # Traverse the cycle from the apex: down to p, across (p, q), up from q.
        # Backward arcs bound the step; the last minimal one leaves.
        delta = np.inf
        leave = -1
        for s in range(lp - 1, -1, -1):
            w = path_p[s]
            if up[w]:
                f = flow[pedge[w]] if pedge[w] >= 0 else art_flow[w]
                if f < delta - tie_tol:
                    delta = f
                    leave = w
                elif f <= delta + tie_tol:
                    if f < delta:
                        delta = f
                    leave = w
        for s in range(lq):
            w = path_q[s]
            if not up[w]:
                f = flow[pedge[w]] if pedge[w] >= 0 else art_flow[w]
                if f < delta - tie_tol:
                    delta = f
                    leave = w
                elif f <= delta + tie_tol:
                    if f < delta:
                        delta = f
                    leave = w
        if leave < 0:
            status = 2
            break
        if delta < 0.0:
            delta = 0.0

        if delta > 0.0:
            for s in range(lp):
                w = path_p[s]
                sign = -1.0 if up[w] else 1.0
                if pedge[w] >= 0:
                    flow[pedge[w]] += sign * delta
                else:
                    art_flow[w] += sign * delta
            for s in range(lq):
                w = path_q[s]
                sign = 1.0 if up[w] else -1.0
                if pedge[w] >= 0:
                    flow[pedge[w]] += sign * delta
                else:
                    art_flow[w] += sign * delta
            flow[best] += delta
        if pedge[leave] >= 0:
            flow[pedge[leave]] = 0.0
            in_tree[pedge[leave]] = False
        else:
            art_flow[leave] = 0.0

        # Re-hang the detached subtree: reverse pointers from the entering
        # endpoint inside it up to the leaving node.
        on_p_side = False
        for s in range(lp):
            if path_p[s] == leave:
                on_p_side = True
                break
        if on_p_side:
            start = p
            new_parent = q
            new_up = True
        else:
            start = q
            new_parent = p
            new_up = False
        prev_parent = new_parent
        prev_edge = best
        prev_up = new_up
        prev_cost = C[p, q - n]
        w = start
        while True:
            nxt = parent[w]
            e_old = pedge[w]
            up_old = up[w]
            c_old = cost_edge[w]
            parent[w] = prev_parent
            pedge[w] = prev_edge
            up[w] = prev_up
            cost_edge[w] = prev_cost
            if w == leave:
                break
            prev_parent = w
            prev_edge = e_old
            prev_up = not up_old
            prev_cost = c_old
            w = nxt
        in_tree[best] = True
        _refresh_tree(parent, pedge, up, cost_edge, depth, pi, root, buf)

    for k in range(n_arcs):
        if flow[k] < 0.0:
            flow[k] = 0.0
    residual = 0.0
    for v in range(n + m):
        if pedge[v] < 0:
            residual += art_flow[v]
    return flow.reshape(n, m), status, residual, it


class SimplexError(RuntimeError):
    pass


def transport(a, b, cost, max_iter=None):
    """Solve ``min <P, cost>`` over plans with row sums ``a`` and column sums ``b``.

    Parameters
    ----------
    a, b : array_like
        Nonnegative masses with (numerically) equal totals.
    cost : array_like, shape (len(a), len(b))
        Nonnegative ground costs.

    Returns
    -------
    plan : ndarray
        Optimal plan for the cost matrix quantized at ``COST_RESOLUTION``.
    value : float
        ``<plan, cost>`` evaluated with the unquantized costs.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape != (a.size, b.size):
        raise ValueError(f"cost shape {cost.shape} does not match ({a.size}, {b.size})")
    if np.any(a < 0) or np.any(b < 0) or np.any(cost < 0):
        raise ValueError("masses and costs must be nonnegative")
    sa, sb = a.sum(), b.sum()
    if abs(sa - sb) > 1e-10 * max(sa, sb, 1.0):
        raise ValueError(f"unbalanced transport: {sa!r} vs {sb!r}")
    plan = np.zeros((a.size, b.size))
    rows = np.flatnonzero(a > 0)
    cols = np.flatnonzero(b > 0)
    if rows.size == 0 or cols.size == 0:
        return plan, 0.0
    sub = cost[np.ix_(rows, cols)]
    cmax = float(sub.max()) if sub.size else 0.0
    n_nodes = rows.size + cols.size + 1
    scale = 1.0 / COST_RESOLUTION
    if cmax > 0:
        # potentials stay below ~2 * n_nodes * (cmax + 1) in quantized units
        scale = min(scale, _INT_BUDGET / (4.0 * n_nodes * (cmax * scale + 1.0)) * scale)
    icost = np.rint(sub * scale).astype(np.int64)
    art = int(n_nodes * (int(icost.max()) + 1) + 1)
    if max_iter is None:
        max_iter = 100 * n_nodes * n_nodes + 10_000
    sub_plan, status, residual, _ = _solve(a[rows], b[cols], icost, art, max_iter)
    if status == 1:
        raise SimplexError("iteration limit reached")
    if status == 2:
        raise SimplexError("unbounded pivot (invalid input)")
    if residual > 1e-9 * max(sa, 1.0):
        raise SimplexError(f"infeasible: {residual:.3e} mass left on artificial arcs")
    plan[np.ix_(rows, cols)] = sub_plan
    return plan, float(np.sum(sub_plan * sub))

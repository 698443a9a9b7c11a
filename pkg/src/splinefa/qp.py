"""Primal active-set solver for small dense convex quadratic programs.

Solves ``min 0.5 x'Hx + q'x  subject to  G x >= h`` starting from a feasible
point. Iterates stay feasible throughout, which is what the estimation loop
relies on, and the final working set is returned so the next call with a
nearby problem can warm start.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConstraintInfeasibleError, NumericalError


@dataclass
class QPResult:
    x: np.ndarray
    active: tuple
    iterations: int
    converged: bool


def _kkt_solve(H, q, x, G_active):
    """Direction and multipliers for the equality-constrained subproblem."""
    n = H.shape[0]
    g = H @ x + q
    if G_active.shape[0] == 0:
        try:
            p = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            p = np.linalg.lstsq(H, -g, rcond=None)[0]
        return p, np.zeros(0)
    m = G_active.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = H
    kkt[:n, n:] = G_active.T
    kkt[n:, :n] = G_active
    rhs = np.concatenate([-g, np.zeros(m)])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    # stationarity: H(x+p) + q = G_active' lam with lam = -mu
    return sol[:n], -sol[n:]


def solve_qp(H, q, G=None, h=None, x0=None, active=None, tol=1e-10, max_iter=None):
    """Minimize ``0.5 x'Hx + q'x`` over ``G x >= h``.

    Parameters
    ----------
    H : ndarray (n, n)
        Symmetric positive semidefinite curvature; a tiny ridge is added
        on the fly if the working-set systems come out singular.
    q : ndarray (n,)
    G, h : ndarray, optional
        Inequality rows; omit both for an unconstrained solve.
    x0 : ndarray, optional
        Feasible starting point (checked); defaults to 0 which must then
        be feasible.
    active : iterable of int, optional
        Warm-start working set; rows not active at ``x0`` are ignored.

    Returns
    -------
    QPResult
    """
    H = np.asarray(H, dtype=float)
    q = np.asarray(q, dtype=float)
    n = q.size
    if G is None or G.shape[0] == 0:
        G = np.zeros((0, n))
        h = np.zeros(0)
    else:
        G = np.asarray(G, dtype=float)
        h = np.asarray(h, dtype=float)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)

    feas_tol = 1e-8 * max(1.0, float(np.abs(h).max()) if h.size else 1.0)
    slack = G @ x - h if G.size else np.zeros(0)
    if slack.size and slack.min() < -feas_tol:
        raise ConstraintInfeasibleError(
            f"starting point infeasible by {-slack.min():.3e}"
        )

    work = []
    if active is not None:
        for i in sorted(set(int(a) for a in active)):
            if 0 <= i < G.shape[0] and slack[i] <= feas_tol:
                work.append(i)
    # include strongly active rows so degenerate starts do not stall
    for i in np.nonzero(slack <= tol)[0] if slack.size else []:
        if i not in work:
            work.append(int(i))
    work.sort()

    if max_iter is None:
        max_iter = 50 * (n + G.shape[0] + 1)
    step_tol = tol * (1.0 + float(np.linalg.norm(x)))

    for it in range(1, max_iter + 1):
        G_act = G[work] if work else np.zeros((0, n))
        p, lam = _kkt_solve(H, q, x, G_act)
        if not np.all(np.isfinite(p)):
            # retry once with a ridge proportional to the curvature scale
            ridge = 1e-10 * (1.0 + np.trace(H) / max(n, 1))
            p, lam = _kkt_solve(H + ridge * np.eye(n), q, x, G_act)
            if not np.all(np.isfinite(p)):
                raise NumericalError("singular working-set system in QP solve")

        if np.linalg.norm(p, np.inf) <= step_tol:
            if lam.size == 0 or lam.min() >= -tol:
                return QPResult(x=x, active=tuple(work), iterations=it, converged=True)
            drop = work[int(np.argmin(lam))]
            work.remove(drop)
            continue

        # largest feasible step along p
        alpha = 1.0
        blocking = -1
        if G.shape[0]:
            gp = G @ p
            cand = np.nonzero(gp < -1e-13)[0]
            for i in cand:
                if i in work:
                    continue
                ai = (h[i] - G[i] @ x) / gp[i]
                if ai < alpha - 1e-15:
                    alpha = max(ai, 0.0)
                    blocking = int(i)
        x = x + alpha * p
        if blocking >= 0:
            work.append(blocking)
            work.sort()
        step_tol = tol * (1.0 + float(np.linalg.norm(x)))

    return QPResult(x=x, active=tuple(work), iterations=max_iter, converged=False)

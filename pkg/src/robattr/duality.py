"""Distributional robustness on finite sample spaces.

A problem lives on support points ``0..n-1`` with base distribution ``P``,
transport cost ``c`` and payoff ``d`` (both n x n with zero diagonal).  A
coupling ``M`` has row sums ``P``; its column sums are the moved distribution
``Q``, which is left free.  All linear programs are solved by a small dense
simplex, so nothing here depends on an external LP solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class VerificationError(AssertionError):
    pass


class InfeasibleLP(ValueError):
    pass


class UnboundedLP(ValueError):
    pass


# -- simplex --------------------------------------------------------------------------

def _pivot(t: np.ndarray, row: int, col: int) -> None:
    t[row] /= t[row, col]
    for r in range(t.shape[0]):
        if r != row and t[r, col] != 0.0:
            t[r] -= t[r, col] * t[row]


def _run(t: np.ndarray, basis: list[int], ncols: int, tol: float) -> None:
    """Minimize the cost row (last row) with Bland's rule; columns >= ncols are frozen."""
    m = t.shape[0] - 1
    while True:
        cost = t[-1, :ncols]
        entering = next((j for j in range(ncols) if cost[j] < -tol), None)
        if entering is None:
            return
        col = t[:m, entering]
        rows = [i for i in range(m) if col[i] > tol]
        if not rows:
            raise UnboundedLP("objective is unbounded")
        ratios = [t[i, -1] / col[i] for i in rows]
        best = min(ratios)
        ties = [i for i, r in zip(rows, ratios) if r <= best + tol * max(1.0, abs(best))]
        leave = min(ties, key=lambda i: basis[i])
        _pivot(t, leave, entering)
        basis[leave] = entering


def linprog_max(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, tol: float = 1e-11):
    """Maximize ``c @ x`` subject to ``A_ub x <= b_ub``, ``A_eq x = b_eq``, ``x >= 0``.

    Two-phase dense simplex with Bland's anti-cycling rule.  Returns
    ``(value, x)``.
    """
    c = np.asarray(c, dtype=np.float64)
    nv = c.size
    A_ub = np.zeros((0, nv)) if A_ub is None else np.atleast_2d(np.asarray(A_ub, dtype=np.float64))
    A_eq = np.zeros((0, nv)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=np.float64))
    b_ub = np.zeros(0) if b_ub is None else np.atleast_1d(np.asarray(b_ub, dtype=np.float64))
    b_eq = np.zeros(0) if b_eq is None else np.atleast_1d(np.asarray(b_eq, dtype=np.float64))
    n_ub, n_eq = A_ub.shape[0], A_eq.shape[0]
    m = n_ub + n_eq
    # columns: original | slacks | artificials | rhs
    a = np.zeros((m, nv + n_ub))
    a[:n_ub, :nv] = A_ub
    a[:n_ub, nv:] = np.eye(n_ub)
    a[n_ub:, :nv] = A_eq
    b = np.concatenate([b_ub, b_eq])
    neg = b < 0
    a[neg] *= -1.0
    b = np.abs(b)
    ncols = nv + n_ub
    t = np.zeros((m + 1, ncols + m + 1))
    t[:m, :ncols] = a
    t[:m, ncols:ncols + m] = np.eye(m)
    t[:m, -1] = b
    basis = list(range(ncols, ncols + m))
    # phase 1: minimize the sum of artificials
    t[-1, :] = 0.0
    t[-1, ncols:ncols + m] = 1.0
    for i in range(m):
        t[-1] -= t[i]
    _run(t, basis, ncols, tol)
    scale = max(1.0, float(np.abs(b).max(initial=0.0)))
    if -t[-1, -1] > 1e-9 * scale:
        raise InfeasibleLP(f"infeasible (phase-1 residual {-t[-1, -1]:.3e})")
    # drive artificials out of the basis, dropping redundant rows
    keep = []
    for i in range(m):
        if basis[i] >= ncols:
            j = next((j for j in range(ncols) if abs(t[i, j]) > 1e-9), None)
            if j is None:
                continue
            _pivot(t, i, j)
            basis[i] = j
        keep.append(i)
    t = np.vstack([t[keep][:, list(range(ncols)) + [t.shape[1] - 1]], np.zeros((1, ncols + 1))])
    basis = [basis[i] for i in keep]
    # phase 2: minimize -c
    cost = np.zeros(ncols)
    cost[:nv] = -c
    t[-1, :ncols] = cost
    for i, j in enumerate(basis):
        if cost[j] != 0.0:
            t[-1] -= cost[j] * t[i]
    _run(t, basis, ncols, tol)
    x = np.zeros(ncols)
    for i, j in enumerate(basis):
        x[j] = t[i, -1]
    x = np.maximum(x[:nv], 0.0)
    return float(c @ x), x


# -- problems -------------------------------------------------------------------------

@dataclass
class FiniteDistProblem:
    P: np.ndarray
    c: np.ndarray
    d: np.ndarray
    rho: float = math.inf
    gamma: float = 0.0
    require_zero_diagonal: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        self.d = np.asarray(self.d, dtype=np.float64)
        n = self.P.size
        if self.P.ndim != 1 or n < 1:
            raise ValueError("P must be a non-empty vector")
        if np.any(self.P < 0) or abs(self.P.sum() - 1.0) > 1e-12:
            raise ValueError("P must be a probability vector")
        if self.c.shape != (n, n) or self.d.shape != (n, n):
            raise ValueError(f"c and d must be {n}x{n}")
        if np.any(self.c < 0):
            raise ValueError("costs must be non-negative")
        if self.require_zero_diagonal and (np.any(np.diag(self.c) != 0) or np.any(np.diag(self.d) != 0)):
            raise ValueError("c and d must have zero diagonals")
        if self.rho < 0 or self.gamma < 0:
            raise ValueError("rho and gamma must be >= 0")

    @property
    def n(self) -> int:
        return self.P.size


def random_problem(n: int, rng: np.random.Generator, rho: float | None = None,
                   zero_diagonal: bool = True) -> FiniteDistProblem:
    P = rng.dirichlet(np.ones(n))
    P /= P.sum()
    c = rng.uniform(0.1, 1.0, size=(n, n))
    d = rng.uniform(0.0, 1.0, size=(n, n))
    if zero_diagonal:
        np.fill_diagonal(c, 0.0)
        np.fill_diagonal(d, 0.0)
    if rho is None:
        rho = float(rng.uniform(0.05, 0.6))
    return FiniteDistProblem(P, c, d, rho, require_zero_diagonal=zero_diagonal)


def _row_constraints(P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = P.size
    A = np.zeros((n, n * n))
    for i in range(n):
        A[i, i * n:(i + 1) * n] = 1.0
    return A, P


def constrained_sup(prob: FiniteDistProblem, rho: float | None = None):
    """max_M sum M*d  s.t. row sums = P, sum M*c <= rho, M >= 0.  Returns (value, M)."""
    rho = prob.rho if rho is None else rho
    if rho < 0:
        raise ValueError("rho must be >= 0")
    n = prob.n
    A_eq, b_eq = _row_constraints(prob.P)
    if math.isinf(rho):
        A_ub = b_ub = None
    else:
        A_ub, b_ub = prob.c.reshape(1, -1), np.array([rho])
    value, x = linprog_max(prob.d.ravel(), A_ub, b_ub, A_eq, b_eq)
    return value, x.reshape(n, n)


def row_max_value(prob: FiniteDistProblem, gamma: float) -> float:
    """sum_i P_i max_j (d_ij - gamma c_ij)."""
    return float(prob.P @ (prob.d - gamma * prob.c).max(axis=1))


def coupling_lagrangian(prob: FiniteDistProblem, gamma: float):
    """max over couplings of sum M*(d - gamma c), by LP.  Returns (value, M)."""
    A_eq, b_eq = _row_constraints(prob.P)
    value, x = linprog_max((prob.d - gamma * prob.c).ravel(), A_eq=A_eq, b_eq=b_eq)
    return value, x.reshape(prob.n, prob.n)


def lagrangian_value(prob: FiniteDistProblem, gamma: float | None = None, tol: float = 1e-9) -> float:
    """Row-max form of the penalized problem, checked against the coupling LP."""
    gamma = prob.gamma if gamma is None else gamma
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    rhs = row_max_value(prob, gamma)
    lhs, _ = coupling_lagrangian(prob, gamma)
    if abs(lhs - rhs) > tol:
        raise VerificationError(f"coupling LP {lhs!r} != row-max {rhs!r}")
    return rhs


def dual_function(prob: FiniteDistProblem, zeta, rho: float) -> np.ndarray:
    zeta = np.atleast_1d(np.asarray(zeta, dtype=np.float64))
    vals = prob.d[None] - zeta[:, None, None] * prob.c[None]
    return vals.max(axis=2) @ prob.P + zeta * rho


def dual_breakpoints(prob: FiniteDistProblem) -> np.ndarray:
    """0 and every non-negative crossing of two lines d_ij - z c_ij within a row."""
    pts = [0.0]
    n = prob.n
    for i in range(n):
        for j in range(n):
            for k in range(j + 1, n):
                dc = prob.c[i, j] - prob.c[i, k]
                if dc != 0.0:
                    z = (prob.d[i, j] - prob.d[i, k]) / dc
                    if z > 0:
                        pts.append(z)
    return np.unique(np.asarray(pts))


def dual_correspondence(prob: FiniteDistProblem, rho: float | None = None, tol: float = 1e-9):
    """Minimize the dual over z >= 0 by scanning breakpoints; check it against the primal.

    Returns ``(gamma_star, primal_value, dual_value)`` where ``gamma_star`` is
    the smallest minimizer.
    """
    rho = prob.rho if rho is None else rho
    if not rho > 0 or math.isinf(rho):
        raise ValueError("rho must be positive and finite")
    z = dual_breakpoints(prob)
    vals = dual_function(prob, z, rho)
    best = vals.min()
    gamma_star = float(z[np.flatnonzero(vals <= best + 1e-12 * max(1.0, abs(best)))[0]])
    dual = float(dual_function(prob, gamma_star, rho)[0])
    primal, _ = constrained_sup(prob, rho)
    if abs(primal - dual) > tol:
        raise VerificationError(f"duality gap {abs(primal - dual):.3e} (primal {primal!r}, dual {dual!r})")
    return gamma_star, primal, dual


def correspondence_check(prob: FiniteDistProblem, rho: float | None = None, lam: float = 1.0,
                         tol: float = 1e-9) -> float:
    """Check that the constrained optimum also solves the penalized problem at gamma*.

    The objective is ``E_P[loss] + lam * E_M[d]``; the loss term does not
    depend on ``M``, so the multiplier for the full objective is ``lam *
    gamma*``.  Returns that multiplier.
    """
    rho = prob.rho if rho is None else rho
    scaled = FiniteDistProblem(prob.P, prob.c, lam * prob.d, rho,
                               require_zero_diagonal=prob.require_zero_diagonal)
    gamma, primal, _ = dual_correspondence(scaled, rho, tol)
    _, M = constrained_sup(scaled, rho)
    penalized = float(np.sum(M * (scaled.d - gamma * scaled.c)))
    best = row_max_value(scaled, gamma)
    if abs(penalized - best) > tol:
        raise VerificationError(f"constrained optimum is not penalized-optimal: {penalized!r} vs {best!r}")
    slack = rho - float(np.sum(M * scaled.c))
    if abs(gamma * slack) > tol:
        raise VerificationError(f"complementary slackness fails: gamma={gamma}, slack={slack}")
    return gamma


def loss_difference_problem(P, c, losses, rho: float) -> FiniteDistProblem:
    """Payoff d_ij = loss_j - loss_i (the sum-size attribution gap)."""
    losses = np.asarray(losses, dtype=np.float64)
    return FiniteDistProblem(P, c, losses[None, :] - losses[:, None], rho)


def wasserstein_sup(P, c, losses, rho: float) -> float:
    """max E_Q[loss] over Q with W_c(P, Q) <= rho, by an LP over (Q, M)."""
    P = np.asarray(P, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    n = P.size
    nv = n * n + n
    obj = np.concatenate([np.zeros(n * n), losses])
    A_eq = np.zeros((2 * n, nv))
    b_eq = np.zeros(2 * n)
    for i in range(n):
        A_eq[i, i * n:(i + 1) * n] = 1.0
        b_eq[i] = P[i]
    for j in range(n):
        A_eq[n + j, j:n * n:n] = 1.0
        A_eq[n + j, n * n + j] = -1.0
    A_ub = np.concatenate([np.asarray(c, dtype=np.float64).ravel(), np.zeros(n)])[None]
    value, _ = linprog_max(obj, A_ub, np.array([rho]), A_eq, b_eq)
    return value


def wasserstein_reduction_check(prob: FiniteDistProblem, losses, tol: float = 1e-9) -> bool:
    """E_P[loss] + constrained_sup equals the Wasserstein-ball worst case of E_Q[loss]."""
    losses = np.asarray(losses, dtype=np.float64)
    expected = losses[None, :] - losses[:, None]
    if not np.allclose(prob.d, expected, rtol=0, atol=1e-15):
        raise ValueError("payoff must be the loss difference loss_j - loss_i")
    lhs = float(prob.P @ losses) + constrained_sup(prob)[0]
    rhs = wasserstein_sup(prob.P, prob.c, losses, prob.rho)
    if abs(lhs - rhs) > tol:
        raise VerificationError(f"reduction fails: {lhs!r} vs {rhs!r}")
    return True


# -- grid oracle ---------------------------------------------------------------------

def _simplex_grid(n: int, step: float) -> np.ndarray:
    k = int(round(1.0 / step))
    if n == 1:
        return np.ones((1, 1))
    rows = []
    for a in range(k + 1):
        rest = _simplex_grid(n - 1, step) * (k - a) / k if a < k else np.zeros((1, n - 1))
        rows.append(np.hstack([np.full((rest.shape[0], 1), a / k), rest]))
    return np.vstack(rows)


def _frontier(cost: np.ndarray, pay: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((-pay, cost))
    cost, pay = cost[order], np.maximum.accumulate(pay[order])
    keep = np.concatenate([[True], pay[1:] > pay[:-1]])
    return cost[keep], pay[keep]


def grid_constrained_sup(prob: FiniteDistProblem, rho: float | None = None,
                         step: float = 1e-3) -> float:
    """Brute-force the constrained problem over kernels Q(.|i) on a simplex grid (n = 3)."""
    rho = prob.rho if rho is None else rho
    if prob.n != 3:
        raise ValueError("the grid oracle handles n = 3")
    grid = _simplex_grid(3, step)
    fronts = []
    for i in range(3):
        cost = prob.P[i] * (grid @ prob.c[i])
        pay = prob.P[i] * (grid @ prob.d[i])
        fronts.append(_frontier(cost, pay))
    (c0, p0), (c1, p1), (c2, p2) = fronts
    c01 = (c0[:, None] + c1[None, :]).ravel()
    p01 = (p0[:, None] + p1[None, :]).ravel()
    ok = c01 <= rho + 1e-15
    c01, p01 = c01[ok], p01[ok]
    pos = np.searchsorted(c2, rho - c01 + 1e-15, side="right") - 1
    valid = pos >= 0
    return float((p01[valid] + p2[pos[valid]]).max())

"""Dense bounded-variable primal simplex.

Problems have the form ``min c @ x`` subject to ``A x (<= | =) b`` and
``lb <= x <= ub`` (bounds may be infinite). Phase I minimizes the sum of
artificial variables; phase II keeps them fixed at zero.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

LE, EQ = "L", "E"


class CycleSuspected(RuntimeError):
    pass


class NumericalBreakdown(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LpProblem:
    A: np.ndarray  # (m, n)
    senses: tuple[str, ...]  # "L" (<=) or "E" (=) per row
    b: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        m, n = np.shape(self.A)
        if len(self.senses) != m or np.shape(self.b) != (m,):
            raise ValueError("row data does not match A")
        if np.shape(self.lb) != (n,) or np.shape(self.ub) != (n,) or np.shape(self.c) != (n,):
            raise ValueError("column data does not match A")
        if np.any(np.asarray(self.lb) > np.asarray(self.ub)):
            raise ValueError("lower bound above upper bound")
        if any(s not in (LE, EQ) for s in self.senses):
            raise ValueError("senses must be 'L' or 'E'")

    @property
    def n_vars(self) -> int:
        return self.A.shape[1]

    def with_bounds(self, lb=None, ub=None) -> "LpProblem":
        return replace(self, lb=self.lb if lb is None else lb, ub=self.ub if ub is None else ub)

    def max_violation(self, x) -> float:
        x = np.asarray(x, float)
        r = self.A @ x - self.b
        eq = np.array([s == EQ for s in self.senses])
        row = np.where(eq, np.abs(r), np.maximum(r, 0.0))
        box = np.maximum(np.maximum(self.lb - x, x - self.ub), 0.0)
        return float(max(row.max(initial=0.0), box.max(initial=0.0)))


@dataclass(frozen=True, eq=False)
class LpResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    x: np.ndarray | None
    objective: float
    pivots: int
    basis: "WarmStart | None" = None


@dataclass(frozen=True, eq=False)
class WarmStart:
    """Final basis of a solve, reusable after bound changes (dual simplex)."""

    basis: np.ndarray
    status: np.ndarray
    x: np.ndarray  # full column vector (structural, slacks, artificials)
    sign: np.ndarray  # artificial column signs


class LpBuilder:
    """Accumulates named variable blocks and constraint rows."""

    def __init__(self):
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.c: list[float] = []
        self.rows: list[tuple[dict, str, float]] = []

    def add_vars(self, n, lb=-np.inf, ub=np.inf, cost=0.0) -> np.ndarray:
        start = len(self.lb)
        self.lb.extend(np.broadcast_to(np.asarray(lb, float), (n,)).tolist())
        self.ub.extend(np.broadcast_to(np.asarray(ub, float), (n,)).tolist())
        self.c.extend(np.broadcast_to(np.asarray(cost, float), (n,)).tolist())
        return np.arange(start, start + n)

    def add_row(self, coeffs: dict, sense: str, rhs: float) -> None:
        self.rows.append((dict(coeffs), sense, float(rhs)))

    def build(self) -> LpProblem:
        n = len(self.lb)
        A = np.zeros((len(self.rows), n))
        for i, (coeffs, _, _) in enumerate(self.rows):
            for j, v in coeffs.items():
                A[i, j] += v
        return LpProblem(
            A, tuple(s for _, s, _ in self.rows), np.array([r for _, _, r in self.rows], dtype=float),
            np.array(self.lb), np.array(self.ub), np.array(self.c),
        )


AT_LB, AT_UB, FREE0, BASIC = 0, 1, 2, 3


def solve_lp(problem: LpProblem, tol=1e-9, max_pivots=100_000, bland_after=5000,
             refactor_every=50) -> LpResult:
    """Two-phase bounded-variable primal simplex on a dense tableau."""
    A = np.asarray(problem.A, float)
    m, n = A.shape
    lb0 = np.asarray(problem.lb, float)
    ub0 = np.asarray(problem.ub, float)
    c0 = np.asarray(problem.c, float)
    if m == 0:
        return _solve_box_only(lb0, ub0, c0)

    # columns: structural | slacks | artificials
    eq = np.array([s == EQ for s in problem.senses])
    n_tot = n + 2 * m
    lb = np.concatenate([lb0, np.zeros(m), np.zeros(m)])
    ub = np.concatenate([ub0, np.where(eq, 0.0, np.inf), np.full(m, np.inf)])

    status = np.full(n_tot, AT_LB, dtype=int)
    x = np.zeros(n_tot)
    for j in range(n):
        if np.isfinite(lb[j]):
            status[j], x[j] = AT_LB, lb[j]
        elif np.isfinite(ub[j]):
            status[j], x[j] = AT_UB, ub[j]
        else:
            status[j], x[j] = FREE0, 0.0
    resid = problem.b - A @ x[:n]
    sign = np.where(resid >= 0, 1.0, -1.0)
    full = np.hstack([A, np.eye(m), np.diag(sign)])
    basis = np.empty(m, dtype=int)
    for i in range(m):
        if not eq[i] and resid[i] >= 0:
            basis[i] = n + i
        else:
            basis[i] = n + m + i
        status[basis[i]] = BASIC
    art = np.arange(n + m, n + 2 * m)

    state = _Tableau(full, problem.b, basis, status, x, lb, ub, tol)
    sign = sign.copy()
    pivots = 0

    cost1 = np.zeros(n_tot)
    cost1[art] = 1.0
    pivots, outcome = state.run(cost1, max_pivots, bland_after, refactor_every, pivots)
    if outcome == "unbounded":  # cannot happen in phase I; treat as breakdown
        raise NumericalBreakdown("phase I reported unbounded")
    if state.objective(cost1) > max(1e-7, 1e-9 * (1 + np.abs(problem.b).max())):
        return LpResult("infeasible", None, np.inf, pivots)

    # phase II: pin artificials at zero
    state.ub[art] = 0.0
    for a in art:
        if state.status[a] != BASIC:
            state.status[a] = AT_LB
            state.x[a] = 0.0
    cost2 = np.concatenate([c0, np.zeros(2 * m)])
    pivots, outcome = state.run(cost2, max_pivots, bland_after, refactor_every, pivots)
    if outcome == "unbounded":
        return LpResult("unbounded", None, -np.inf, pivots)
    return _finalize(problem, state, c0, pivots, sign)


def _finalize(problem, state, c0, pivots, sign) -> LpResult:
    n = problem.n_vars
    state.refactor()
    xs = state.x[:n].copy()
    viol = problem.max_violation(xs)
    if viol > 1e-6 * (1 + np.abs(xs).max(initial=0.0)):
        raise NumericalBreakdown(f"final point violates constraints by {viol:.2e}")
    warm = WarmStart(state.basis.copy(), state.status.copy(), state.x.copy(), sign)
    return LpResult("optimal", xs, float(c0 @ xs), pivots, warm)


def resolve_lp(problem: LpProblem, warm: WarmStart, tol=1e-9, max_pivots=20_000) -> LpResult:
    """Re-solve ``problem`` (same rows and costs, new bounds) from a previous optimal basis.

    The old basis stays dual feasible under bound changes, so a bounded dual
    simplex restores primal feasibility. Falls back to a cold solve if the
    warm basis breaks down numerically.
    """
    A = np.asarray(problem.A, float)
    m, n = A.shape
    if m == 0:
        return _solve_box_only(problem.lb, problem.ub, problem.c)
    eq = np.array([s == EQ for s in problem.senses])
    lb = np.concatenate([problem.lb, np.zeros(m), np.zeros(m)])
    ub = np.concatenate([problem.ub, np.where(eq, 0.0, np.inf), np.zeros(m)])
    full = np.hstack([A, np.eye(m), np.diag(warm.sign)])
    status = warm.status.copy()
    x = warm.x.copy()
    for j in np.flatnonzero(status != BASIC):
        if status[j] == AT_LB:
            x[j] = lb[j] if np.isfinite(lb[j]) else (ub[j] if np.isfinite(ub[j]) else 0.0)
            if not np.isfinite(lb[j]):
                status[j] = AT_UB if np.isfinite(ub[j]) else FREE0
        elif status[j] == AT_UB:
            x[j] = ub[j] if np.isfinite(ub[j]) else (lb[j] if np.isfinite(lb[j]) else 0.0)
            if not np.isfinite(ub[j]):
                status[j] = AT_LB if np.isfinite(lb[j]) else FREE0
    cost = np.concatenate([np.asarray(problem.c, float), np.zeros(2 * m)])
    try:
        state = _Tableau(full, problem.b, warm.basis.copy(), status, x, lb, ub, tol)
        pivots, outcome = state.dual_run(cost, max_pivots)
        if outcome == "optimal":
            # primal cleanup in case noise left a slightly dual-infeasible basis
            pivots, outcome = state.run(cost, max_pivots, 5000, 50, pivots)
    except (NumericalBreakdown, CycleSuspected):
        return solve_lp(problem, tol)
    if outcome == "infeasible":
        return LpResult("infeasible", None, np.inf, pivots)
    if outcome != "optimal":
        return solve_lp(problem, tol)
    try:
        return _finalize(problem, state, cost[:n], pivots, warm.sign)
    except NumericalBreakdown:
        return solve_lp(problem, tol)


def _solve_box_only(lb, ub, c) -> LpResult:
    x = np.zeros_like(c)
    for j, cj in enumerate(c):
        if cj > 0:
            x[j] = lb[j]
        elif cj < 0:
            x[j] = ub[j]
        else:
            x[j] = lb[j] if np.isfinite(lb[j]) else (ub[j] if np.isfinite(ub[j]) else 0.0)
        if not np.isfinite(x[j]):
            return LpResult("unbounded", None, -np.inf, 0)
    return LpResult("optimal", x, float(c @ x), 0)


class _Tableau:
    def __init__(self, full, b, basis, status, x, lb, ub, tol):
        self.full = full
        self.b = np.asarray(b, float)
        self.basis = basis
        self.status = status
        self.x = x
        self.lb = lb
        self.ub = ub
        self.tol = tol
        self.refactor()

    def refactor(self):
        B = self.full[:, self.basis]
        try:
            self.T = np.linalg.solve(B, self.full)
        except np.linalg.LinAlgError as exc:
            raise NumericalBreakdown("basis matrix became singular") from exc
        nb = self.status != BASIC
        rhs = self.b - self.full[:, nb] @ self.x[nb]
        self.x[self.basis] = np.linalg.solve(B, rhs)

    def objective(self, cost) -> float:
        return float(cost @ self.x)

    def run(self, cost, max_pivots, bland_after, refactor_every, pivots):
        tol = self.tol
        degenerate = 0
        since_refactor = 0
        n_tot = self.full.shape[1]
        idx_all = np.arange(n_tot)
        while True:
            if pivots >= max_pivots:
                raise CycleSuspected(f"pivot cap {max_pivots} reached")
            d = cost - cost[self.basis] @ self.T
            st = self.status
            lo_ok = (st == AT_LB) & (d < -tol) & (self.x < self.ub)
            up_ok = (st == AT_UB) & (d > tol) & (self.x > self.lb)
            fr_ok = (st == FREE0) & (np.abs(d) > tol)
            elig = lo_ok | up_ok | fr_ok
            if not elig.any():
                if since_refactor == 0:
                    return pivots, "optimal"
                # confirm optimality on a fresh factorization
                self.refactor()
                since_refactor = 0
                continue
            cand = idx_all[elig]
            if degenerate >= bland_after:
                j = int(cand[0])
            else:
                j = int(cand[np.argmax(np.abs(d[cand]))])
            direction = 1.0 if d[j] < 0 else -1.0

            col = self.T[:, j] * direction  # basic values move by -t * col
            xb = self.x[self.basis]
            lbb = self.lb[self.basis]
            ubb = self.ub[self.basis]
            t_best = np.inf
            leave = -1
            leave_to_ub = False
            piv_tol = 1e-9
            with np.errstate(divide="ignore", invalid="ignore"):
                dec = col > piv_tol
                t_dec = np.where(dec & np.isfinite(lbb), (xb - lbb) / col, np.inf)
                inc = col < -piv_tol
                t_inc = np.where(inc & np.isfinite(ubb), (ubb - xb) / (-col), np.inf)
            t_dec = np.maximum(t_dec, 0.0)
            t_inc = np.maximum(t_inc, 0.0)
            t_rows = np.minimum(t_dec, t_inc)
            if np.isfinite(t_rows).any():
                t_min = t_rows.min()
                ties = np.flatnonzero(t_rows <= t_min + 1e-12)
                if degenerate >= bland_after:
                    r = int(ties[np.argmin(self.basis[ties])])
                else:
                    r = int(ties[np.argmax(np.abs(col[ties]))])
                t_best = t_rows[r]
                leave = r
                leave_to_ub = t_inc[r] < t_dec[r]
            span = self.ub[j] - self.lb[j]
            if np.isfinite(span) and span <= t_best:
                # bound flip, no basis change
                t_best = span
                leave = -1
            if not np.isfinite(t_best):
                return pivots, "unbounded"

            pivots += 1
            degenerate = degenerate + 1 if t_best <= 1e-12 else 0
            self.x[self.basis] = xb - t_best * col
            self.x[j] += direction * t_best
            if leave < 0:
                self.status[j] = AT_UB if direction > 0 else AT_LB
                self.x[j] = self.ub[j] if direction > 0 else self.lb[j]
                since_refactor += 1
                continue
            out = self.basis[leave]
            self.x[out] = self.ub[out] if leave_to_ub else self.lb[out]
            self.status[out] = AT_UB if leave_to_ub else AT_LB
            self.status[j] = BASIC
            self.basis[leave] = j
            since_refactor += 1
            if since_refactor >= refactor_every:
                self.refactor()
                since_refactor = 0
            else:
                prow = self.T[leave] / self.T[leave, j]
                self.T -= np.outer(self.T[:, j], prow)
                self.T[leave] = prow

    def dual_run(self, cost, max_pivots):
        """Bounded dual simplex from a dual-feasible basis."""
        tol = self.tol
        pivots = 0
        since_refactor = 0
        while True:
            xb = self.x[self.basis]
            lbb = self.lb[self.basis]
            ubb = self.ub[self.basis]
            below = lbb - xb
            above = xb - ubb
            viol = np.maximum(below, above)
            r = int(np.argmax(viol))
            if viol[r] <= 1e-9 * (1 + abs(xb[r])):
                if since_refactor == 0:
                    return pivots, "optimal"
                self.refactor()
                since_refactor = 0
                continue
            if pivots >= max_pivots:
                raise CycleSuspected(f"dual pivot cap {max_pivots} reached")
            d = cost - cost[self.basis] @ self.T
            row = self.T[r]
            st = self.status
            movable = (st != BASIC) & (self.ub > self.lb)
            increase = below[r] > above[r]  # basic r must rise to its lower bound
            # x_B[r] changes by -row[j] * dx_j
            if increase:
                elig = movable & (((st == AT_LB) & (row < -1e-9)) | ((st == AT_UB) & (row > 1e-9))
                                  | ((st == FREE0) & (np.abs(row) > 1e-9)))
                target = lbb[r]
            else:
                elig = movable & (((st == AT_LB) & (row > 1e-9)) | ((st == AT_UB) & (row < -1e-9))
                                  | ((st == FREE0) & (np.abs(row) > 1e-9)))
                target = ubb[r]
            cand = np.flatnonzero(elig)
            if cand.size == 0:
                return pivots, "infeasible"
            ratios = np.abs(d[cand]) / np.abs(row[cand])
            best = ratios.min()
            ties = cand[ratios <= best + 1e-12]
            j = int(ties[np.argmax(np.abs(row[ties]))])
            step = (xb[r] - target) / row[j]
            self.x[self.basis] = xb - step * self.T[:, j]
            self.x[j] += step
            out = self.basis[r]
            self.x[out] = target
            self.status[out] = AT_LB if increase else AT_UB
            self.status[j] = BASIC
            self.basis[r] = j
            pivots += 1
            since_refactor += 1
            if since_refactor >= 50:
                self.refactor()
                since_refactor = 0
            else:
                prow = self.T[r] / self.T[r, j]
                self.T -= np.outer(self.T[:, j], prow)
                self.T[r] = prow

"""Volt-var optimization over a surrogate power-flow model.

Decision variables are the inverter setpoints ``q^g`` (reactive generation,
consumption-positive net load ``q = q^c - q^g``). The objective is the l1
deviation ``sum_i |v_i - 1|`` of the surrogate's predicted voltages. Affine
surrogates give an LP; the relu surrogate adds one binary per hidden unit
through a big-M encoding and is solved by branch-and-bound.
"""

from __future__ import annotations

import heapq
import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from ..feeder import FeederModel, solve_distflow
from ..linear import LinDistFlowModel, LsModel
from ..neural import NeuralPfModel, nn_forward
from ..report import compute_stats
from .lp import EQ, LE, LpBuilder, LpProblem, LpResult, resolve_lp, solve_lp

BOUND_SLACK = 1e-6


class UntrainedSurrogate(ValueError):
    pass


class TooLarge(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ReluEncoding:
    lower: np.ndarray  # widened pre-activation bounds, lower <= 0 <= upper
    upper: np.ndarray
    raw_lower: np.ndarray  # exact interval bounds before widening
    raw_upper: np.ndarray
    a_idx: np.ndarray  # variable indices of hidden pre-activations
    z_idx: np.ndarray  # ... of hidden outputs
    d_idx: np.ndarray  # ... of binary indicators

    @property
    def stable_active(self) -> np.ndarray:
        return self.raw_lower >= 0

    @property
    def stable_inactive(self) -> np.ndarray:
        return self.raw_upper <= 0


@dataclass(frozen=True, eq=False)
class VvoProblem:
    lp: LpProblem
    qg_idx: np.ndarray
    t_idx: np.ndarray
    encoding: ReluEncoding | None
    surrogate: object
    scenario_p: np.ndarray
    scenario_q: np.ndarray
    der_index: np.ndarray

    @property
    def n_binaries(self) -> int:
        return 0 if self.encoding is None else self.encoding.d_idx.size

    def surrogate_voltages(self, qg) -> np.ndarray:
        q = self.scenario_q.copy()
        q[self.der_index] -= qg
        return self.surrogate.predict(self.scenario_p, q)

    def surrogate_objective(self, qg) -> float:
        return float(np.sum(np.abs(self.surrogate_voltages(qg) - 1.0)))


@dataclass(frozen=True, eq=False)
class VvoSolution:
    q_g: np.ndarray | None
    v_pred: np.ndarray | None
    objective: float
    gap: float
    status: str  # optimal | gap-limit | node-limit | infeasible
    nodes: int = 0
    wall_time: float = 0.0
    v_true: np.ndarray | None = None
    bound_trace: list = field(default_factory=list)


def compute_preactivation_bounds(nn: NeuralPfModel, input_lo, input_hi, slack=BOUND_SLACK):
    """Interval bounds of ``W1 @ x + b`` over the scaled input box ``[input_lo, input_hi]``.

    Returns ``(lower, upper, raw_lower, raw_upper)``; the first pair is
    widened to contain 0 and padded by ``slack``.
    """
    lo = np.asarray(input_lo, float)
    hi = np.asarray(input_hi, float)
    W = nn.W1
    raw_l = np.maximum(W, 0) @ lo + np.minimum(W, 0) @ hi + nn.b
    raw_u = np.maximum(W, 0) @ hi + np.minimum(W, 0) @ lo + nn.b
    return np.minimum(raw_l, 0.0) - slack, np.maximum(raw_u, 0.0) + slack, raw_l, raw_u


def encode_relu_bigm(builder: LpBuilder, encoding: ReluEncoding) -> None:
    """Rows ``z >= a``, ``z <= a - L (1 - d)``, ``z <= U d``; ``z >= 0`` lives in the bounds."""
    for k in range(encoding.a_idx.size):
        a, z, d = int(encoding.a_idx[k]), int(encoding.z_idx[k]), int(encoding.d_idx[k])
        L, U = float(encoding.lower[k]), float(encoding.upper[k])
        builder.add_row({a: 1.0, z: -1.0}, LE, 0.0)
        builder.add_row({z: 1.0, a: -1.0, d: -L}, LE, -L)
        builder.add_row({z: 1.0, d: -U}, LE, 0.0)


def _scaled_q_affine(nn: NeuralPfModel, p, q_c, der_index):
    """Scaled input ``x_s = x0 + S @ qg`` with ``S`` nonzero only on DER q-features."""
    n = nn.n_buses
    x0 = nn.in_scaler.scale(np.concatenate([p, q_c]))
    S = np.zeros((2 * n, der_index.size))
    inv = np.where(nn.in_scaler.degenerate, 0.0, 1.0 / nn.in_scaler.span)
    for col, i in enumerate(der_index):
        S[n + i, col] = -inv[n + i]
    return x0, S


def assemble_vvo(surrogate, model: FeederModel, p, q_c) -> VvoProblem:
    """Build the l1 volt-var problem for one scenario (net active load ``p``, demand ``q_c``)."""
    if surrogate is None:
        raise UntrainedSurrogate("no surrogate supplied")
    p = np.asarray(p, float)
    q_c = np.asarray(q_c, float)
    der = model.der_index
    n = model.n_buses
    bld = LpBuilder()
    qg = bld.add_vars(der.size, model.qg_min, model.qg_max)
    t = bld.add_vars(n, 0.0, np.inf, cost=1.0)

    if isinstance(surrogate, (LinDistFlowModel, LsModel)):
        v_const = surrogate.predict(p, q_c)
        M = -np.asarray(surrogate.q_jacobian(p, q_c))[:, der]  # dv/dqg
        for i in range(n):
            row = {int(qg[c]): float(M[i, c]) for c in range(der.size) if M[i, c] != 0.0}
            # t_i >= v_i - 1  and  t_i >= 1 - v_i
            bld.add_row({**row, int(t[i]): -1.0}, LE, 1.0 - v_const[i])
            bld.add_row({**{k: -v for k, v in row.items()}, int(t[i]): -1.0}, LE, v_const[i] - 1.0)
        return VvoProblem(bld.build(), qg, t, None, surrogate, p, q_c, der)

    if not isinstance(surrogate, NeuralPfModel):
        raise UntrainedSurrogate(f"unsupported surrogate {type(surrogate).__name__}")
    nn = surrogate
    if not np.all(np.isfinite(nn.W1)) or nn.in_scaler is None:
        raise UntrainedSurrogate("surrogate parameters are not usable")
    k_units = nn.hidden
    x0, S = _scaled_q_affine(nn, p, q_c, der)
    # scaled input box over the qg box
    x_a = x0 + S @ model.qg_min
    x_b = x0 + S @ model.qg_max
    lower, upper, raw_l, raw_u = compute_preactivation_bounds(nn, np.minimum(x_a, x_b), np.maximum(x_a, x_b))
    a = bld.add_vars(k_units, lower, upper)
    z = bld.add_vars(k_units, 0.0, upper)
    d = bld.add_vars(k_units, 0.0, 1.0)
    enc = ReluEncoding(lower, upper, raw_l, raw_u, a, z, d)

    # a = W1 (x0 + S qg) + b
    G = nn.W1 @ S
    a_const = nn.W1 @ x0 + nn.b
    for k in range(k_units):
        row = {int(a[k]): 1.0}
        for c in range(der.size):
            if G[k, c] != 0.0:
                row[int(qg[c])] = -float(G[k, c])
        bld.add_row(row, EQ, float(a_const[k]))
    encode_relu_bigm(bld, enc)

    # v = out_lo + out_span * (W2 z)
    span = np.where(nn.out_scaler.degenerate, 0.0, nn.out_scaler.span)
    lo = nn.out_scaler.lo
    for i in range(n):
        coef = span[i] * nn.W2[i]
        row = {int(z[k]): float(coef[k]) for k in range(k_units) if coef[k] != 0.0}
        bld.add_row({**row, int(t[i]): -1.0}, LE, 1.0 - lo[i])
        bld.add_row({**{kk: -v for kk, v in row.items()}, int(t[i]): -1.0}, LE, lo[i] - 1.0)
    return VvoProblem(bld.build(), qg, t, enc, nn, p, q_c, der)


def _finish(prob: VvoProblem, res: LpResult, status, t0, nodes=0, gap=0.0, trace=None) -> VvoSolution:
    if res is None or res.status != "optimal":
        return VvoSolution(None, None, np.inf, np.inf, "infeasible", nodes, time.perf_counter() - t0)
    qg = res.x[prob.qg_idx]
    return VvoSolution(qg, prob.surrogate_voltages(qg), res.objective, gap, status, nodes,
                       time.perf_counter() - t0, bound_trace=trace or [])


def solve_affine_vvo(prob: VvoProblem) -> VvoSolution:
    t0 = time.perf_counter()
    if prob.encoding is not None:
        raise ValueError("relu-encoded problem needs solve_bnb")
    return _finish(prob, solve_lp(prob.lp), "optimal", t0)


@dataclass(frozen=True)
class BnbConfig:
    gap: float = 1e-6
    max_nodes: int = 100_000
    time_limit: float = np.inf
    int_tol: float = 1e-7


def solve_bnb(prob: VvoProblem, config: BnbConfig = BnbConfig()) -> VvoSolution:
    """Best-first branch-and-bound over the relu indicators.

    Branches on the most fractional indicator (lowest index on ties). Child
    relaxations are re-solved from the parent's basis. At each node the LP's
    ``q^g`` is pushed through the exact network to obtain a feasible
    incumbent, and every improvement is polished by pattern-LP descent.
    """
    t0 = time.perf_counter()
    if prob.encoding is None:
        return solve_affine_vvo(prob)
    enc = prob.encoding
    lb0, ub0 = prob.lp.lb.copy(), prob.lp.ub.copy()
    # stably active/inactive units need no branching
    lb0[enc.d_idx[enc.stable_active]] = 1.0
    ub0[enc.d_idx[enc.stable_inactive]] = 0.0

    best_obj = np.inf
    best_qg = None
    counter = itertools.count()
    heap: list = []
    trace: list = []
    nodes = 0
    global_lb = -np.inf

    def node_lp(lb, ub, parent=None):
        problem = prob.lp.with_bounds(lb, ub)
        if parent is not None and parent.basis is not None:
            return resolve_lp(problem, parent.basis)
        return solve_lp(problem)

    def try_incumbent(qg):
        nonlocal best_obj, best_qg
        qg = np.clip(qg, prob.lp.lb[prob.qg_idx], prob.lp.ub[prob.qg_idx])
        val = prob.surrogate_objective(qg)
        if val < best_obj - 1e-12:
            qg, val = pattern_descent(prob, qg, val)
            best_obj, best_qg = val, qg.copy()

    root = node_lp(lb0, ub0)
    nodes += 1
    if root.status != "optimal":
        return VvoSolution(None, None, np.inf, np.inf, "infeasible", nodes, time.perf_counter() - t0)
    heapq.heappush(heap, (root.objective, next(counter), lb0, ub0, root))
    status = "optimal"
    while heap:
        bound, _, lb, ub, res = heapq.heappop(heap)
        global_lb = max(global_lb, bound)
        trace.append(global_lb)
        try_incumbent(res.x[prob.qg_idx])
        if best_obj - global_lb <= config.gap:
            heapq.heappush(heap, (bound, next(counter), lb, ub, res))
            break
        if bound >= best_obj - config.gap:
            continue
        dvals = res.x[enc.d_idx]
        free = lb[enc.d_idx] < ub[enc.d_idx]
        frac = np.where(free, np.minimum(dvals, 1.0 - dvals), -1.0)
        if frac.max() <= config.int_tol:
            # integral indicators: the big-M rows pin z = relu(a) and the LP value is exact
            if res.objective < best_obj:
                best_obj, best_qg = res.objective, res.x[prob.qg_idx].copy()
            continue
        k = int(np.flatnonzero(frac >= frac.max() - 1e-12)[0])
        if nodes >= config.max_nodes or time.perf_counter() - t0 > config.time_limit:
            heapq.heappush(heap, (bound, next(counter), lb, ub, res))
            status = "node-limit"
            break
        col = int(enc.d_idx[k])
        for val in (0.0, 1.0):
            clb, cub = lb.copy(), ub.copy()
            clb[col] = cub[col] = val
            child = node_lp(clb, cub, res)
            nodes += 1
            if child.status == "optimal" and child.objective < best_obj - config.gap:
                heapq.heappush(heap, (max(child.objective, bound), next(counter), clb, cub, child))
            elif child.status == "optimal":
                try_incumbent(child.x[prob.qg_idx])
    if heap:
        global_lb = max(global_lb, min(h[0] for h in heap))
        gap = max(best_obj - global_lb, 0.0)
    else:
        gap = 0.0
    if status == "node-limit" and gap <= config.gap:
        status = "optimal"
    elif status == "optimal" and gap > config.gap:
        status = "gap-limit"
    sol = VvoSolution(best_qg, prob.surrogate_voltages(best_qg), best_obj, gap, status, nodes,
                      time.perf_counter() - t0, bound_trace=trace)
    return sol


def pattern_lp(prob: VvoProblem, pattern) -> LpProblem:
    """Affine LP for a fixed activation pattern, built directly from the network weights.

    Active units require ``a >= 0`` and pass ``a`` through; inactive units
    require ``a <= 0`` and output zero.
    """
    nn: NeuralPfModel = prob.surrogate
    der = prob.der_index
    n = nn.n_buses
    x0, S = _scaled_q_affine(nn, prob.scenario_p, prob.scenario_q, der)
    G = nn.W1 @ S
    a_const = nn.W1 @ x0 + nn.b
    on = np.asarray(pattern, dtype=bool)
    span = np.where(nn.out_scaler.degenerate, 0.0, nn.out_scaler.span)
    W2on = nn.W2[:, on]
    v_const = nn.out_scaler.lo + span * (W2on @ a_const[on])
    M = span[:, None] * (W2on @ G[on])
    bld = LpBuilder()
    qg = bld.add_vars(der.size, prob.lp.lb[prob.qg_idx], prob.lp.ub[prob.qg_idx])
    t = bld.add_vars(n, 0.0, np.inf, cost=1.0)
    for k in range(nn.hidden):
        sgn = -1.0 if on[k] else 1.0  # active: -(a) <= 0 ; inactive: a <= 0
        bld.add_row({int(qg[c]): sgn * float(G[k, c]) for c in range(der.size)}, LE, -sgn * float(a_const[k]))
    for i in range(n):
        row = {int(qg[c]): float(M[i, c]) for c in range(der.size)}
        bld.add_row({**row, int(t[i]): -1.0}, LE, 1.0 - v_const[i])
        bld.add_row({**{k: -v for k, v in row.items()}, int(t[i]): -1.0}, LE, v_const[i] - 1.0)
    return bld.build()


def pattern_descent(prob: VvoProblem, qg, value, max_rounds=50, tol=1e-9):
    """Local search over activation regions.

    Solves the affine LP of the region containing ``qg``; the optimum lies on
    a region face, where both readings of the near-zero units are tried so the
    walk can cross into a neighbouring region. Stops when no LP improves.
    """
    nn: NeuralPfModel = prob.surrogate
    x0, S = _scaled_q_affine(nn, prob.scenario_p, prob.scenario_q, prob.der_index)
    G = nn.W1 @ S
    a_const = nn.W1 @ x0 + nn.b
    n_q = prob.qg_idx.size
    for _ in range(max_rounds):
        a = a_const + G @ qg
        best = None
        for pattern in {tuple(a > tol), tuple(a > -tol)}:
            res = solve_lp(pattern_lp(prob, pattern))
            if res.status == "optimal" and (best is None or res.objective < best.objective):
                best = res
        if best is None:
            break
        cand = best.x[:n_q]
        cval = prob.surrogate_objective(cand)
        if cval >= value - 1e-12:
            break
        qg, value = cand, cval
    return qg, value


def brute_force_vvo(prob: VvoProblem, lp_solver=solve_lp, max_units=16) -> VvoSolution:
    """Enumerate every activation pattern and keep the best feasible LP."""
    t0 = time.perf_counter()
    if prob.encoding is None:
        return solve_affine_vvo(prob)
    k_units = prob.surrogate.hidden
    if k_units > max_units:
        raise TooLarge(f"{k_units} hidden units exceeds the enumeration limit of {max_units}")
    best = None
    n_q = prob.qg_idx.size
    for bits in itertools.product((False, True), repeat=k_units):
        res = lp_solver(pattern_lp(prob, bits))
        if res.status == "optimal" and (best is None or res.objective < best.objective):
            best = res
    if best is None:
        return VvoSolution(None, None, np.inf, np.inf, "infeasible", 2**k_units, time.perf_counter() - t0)
    qg = best.x[:n_q]
    return VvoSolution(qg, prob.surrogate_voltages(qg), best.objective, 0.0, "optimal", 2**k_units,
                       time.perf_counter() - t0)


def realized_voltages(model: FeederModel, p, q_c, q_g) -> np.ndarray:
    q = np.asarray(q_c, float).copy()
    if q_g is not None:
        q[model.der_index] -= q_g
    return solve_distflow(model, p, q).v


def evaluate_vvo(model: FeederModel, p, q_c, solution: VvoSolution, thresholds=(0.01, 0.03, 0.05)):
    """Apply the setpoints on the exact feeder; returns ``(v_true, DeviationStats)``."""
    v = realized_voltages(model, p, q_c, solution.q_g)
    return v, compute_stats(v, thresholds)


def nn_objective(nn, p, q):
    return float(np.sum(np.abs(nn_forward(nn, p, q) - 1.0)))

"""Piecewise-linear volt-var droop rules with IEEE 1547 parameter limits.

Per inverter the rule has four parameters: setpoint ``v_set``, deadband
half-width ``deadband``, ramp end ``ramp_end`` (measured from the setpoint)
and saturation level ``q_max``. Output is reactive *generation*: positive
for low voltage, negative for high voltage.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

V_SET_RANGE = (0.95, 1.05)
DEADBAND_RANGE = (0.0, 0.03)
RAMP_GAP = 0.02
RAMP_MAX = 0.18
PARAM_NAMES = ("v_set", "deadband", "ramp_end", "q_max")


@dataclass(frozen=True, eq=False)
class VvcRuleParams:
    buses: tuple[int, ...]
    v_set: np.ndarray
    deadband: np.ndarray
    ramp_end: np.ndarray
    q_max: np.ndarray

    def __len__(self):
        return len(self.buses)

    def as_vector(self) -> np.ndarray:
        """Stack as ``[v_set, deadband, ramp_end, q_max]`` blocks (length 4|D|)."""
        return np.concatenate([self.v_set, self.deadband, self.ramp_end, self.q_max])

    @classmethod
    def from_vector(cls, buses, vec) -> "VvcRuleParams":
        k = len(buses)
        vec = np.asarray(vec, dtype=float)
        return cls(tuple(buses), *(vec[i * k:(i + 1) * k].copy() for i in range(4)))

    def with_q_max(self, q_max) -> "VvcRuleParams":
        return replace(self, q_max=np.broadcast_to(np.asarray(q_max, float), (len(self),)).copy())

    def slopes(self) -> np.ndarray:
        return slope(self.deadband, self.ramp_end, self.q_max)

    def allclose(self, other, atol=0.0) -> bool:
        return self.buses == other.buses and np.allclose(self.as_vector(), other.as_vector(), rtol=0, atol=atol)


def default_params(buses, q_hat) -> VvcRuleParams:
    """Mid-box starting point: setpoint 1.0, deadband 0.01, ramp end 0.08, half capability."""
    k = len(buses)
    q_hat = np.broadcast_to(np.asarray(q_hat, float), (k,))
    return VvcRuleParams(tuple(buses), np.full(k, 1.0), np.full(k, 0.01), np.full(k, 0.08), 0.5 * q_hat)


def slope(deadband, ramp_end, q_max):
    return np.asarray(q_max, float) / (np.asarray(ramp_end, float) - np.asarray(deadband, float))


def eval_rule(v, v_set, deadband, ramp_end, q_max):
    """Reactive generation of the droop curve, written segment by segment."""
    v = np.asarray(v, dtype=float)
    a = slope(deadband, ramp_end, q_max)
    lo_ramp = v_set - deadband
    hi_ramp = v_set + deadband
    return np.select(
        [v <= v_set - ramp_end, v < lo_ramp, v <= hi_ramp, v < v_set + ramp_end],
        [q_max, a * (lo_ramp - v), 0.0, a * (hi_ramp - v)],
        default=-np.asarray(q_max, float) * np.ones_like(v),
    )


def _relu(x):
    return np.maximum(x, 0.0)


def eval_rule_relu(v, v_set, deadband, ramp_end, q_max):
    """Same curve as a slope-weighted sum of four relus."""
    v = np.asarray(v, dtype=float)
    a = slope(deadband, ramp_end, q_max)
    return a * (
        _relu((v_set - deadband) - v)
        - _relu((v_set - ramp_end) - v)
        - _relu(v - (v_set + deadband))
        + _relu(v - (v_set + ramp_end))
    )


def rule_derivatives(v, v_set, deadband, ramp_end, q_max):
    """Partial derivatives ``(dq/dv, dq/dv_set, dq/ddeadband, dq/dramp_end, dq/dq_max)``.

    At a breakpoint the one-sided value from the deadband or saturation side
    is returned.
    """
    v = np.asarray(v, dtype=float)
    width = np.asarray(ramp_end, float) - np.asarray(deadband, float)
    a = np.asarray(q_max, float) / width
    a1 = (v_set - deadband) - v
    a2 = (v_set - ramp_end) - v
    a3 = v - (v_set + deadband)
    a4 = v - (v_set + ramp_end)
    h1 = (a1 > 0).astype(float)
    h2 = (a2 >= 0).astype(float)
    h3 = (a3 > 0).astype(float)
    h4 = (a4 >= 0).astype(float)
    s = _relu(a1) - _relu(a2) - _relu(a3) + _relu(a4)
    da_dq = 1.0 / width
    da_dwidth = -a / width
    dv = a * (-h1 + h2 - h3 + h4)
    dvset = a * (h1 - h2 + h3 - h4)
    ddelta = a * (-h1 + h3) - da_dwidth * s
    dsigma = a * (h2 - h4) + da_dwidth * s
    dq = da_dq * s
    return dv, dvset, ddelta, dsigma, dq


def project_params(params: VvcRuleParams, q_hat, caps=None) -> VvcRuleParams:
    """Clamp onto the IEEE box in order ``v_set, deadband, ramp_end, q_max``.

    With ``caps`` the saturation level is further reduced so the slope never
    exceeds the per-inverter cap. The result is idempotent.
    """
    v_set = np.clip(params.v_set, *V_SET_RANGE)
    deadband = np.clip(params.deadband, *DEADBAND_RANGE)
    ramp_end = np.clip(params.ramp_end, deadband + RAMP_GAP, RAMP_MAX)
    q_max = np.clip(params.q_max, 0.0, np.broadcast_to(q_hat, (len(params),)))
    if caps is not None:
        q_max = np.minimum(q_max, np.asarray(caps, float) * (ramp_end - deadband))
    return VvcRuleParams(params.buses, v_set, deadband, ramp_end, q_max)


def in_box(params: VvcRuleParams, q_hat, caps=None, tol=1e-12) -> bool:
    ok = (
        np.all(params.v_set >= V_SET_RANGE[0] - tol) and np.all(params.v_set <= V_SET_RANGE[1] + tol)
        and np.all(params.deadband >= -tol) and np.all(params.deadband <= DEADBAND_RANGE[1] + tol)
        and np.all(params.ramp_end >= params.deadband + RAMP_GAP - tol)
        and np.all(params.ramp_end <= RAMP_MAX + tol)
        and np.all(params.q_max >= -tol) and np.all(params.q_max <= np.asarray(q_hat) + tol)
    )
    if caps is not None:
        ok = ok and np.all(params.slopes() <= np.asarray(caps) * (1 + 1e-12) + tol)
    return bool(ok)


@dataclass(frozen=True, eq=False)
class StabilityConfig:
    epsilon: float
    x_row_caps: np.ndarray  # per-DER slope caps
    spectral_norm: float  # ||D_cap X_DD||_2 at the caps, after any shrink
    shrink: float  # uniform factor applied to the row-sum caps (1.0 = none)


def power_iteration_norm(A, iters=500, tol=1e-13) -> float:
    """Spectral norm by power iteration on ``A^T A``."""
    A = np.asarray(A, float)
    x = np.ones(A.shape[1]) / np.sqrt(A.shape[1])
    sigma = 0.0
    for _ in range(iters):
        y = A.T @ (A @ x)
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        x = y / ny
        new = np.sqrt(ny)
        if abs(new - sigma) <= tol * max(new, 1.0):
            return float(new)
        sigma = new
    return float(sigma)


def stability_caps(X, der_index, epsilon=0.05, neighbors_only=False, adjacency=None) -> StabilityConfig:
    """Per-inverter slope caps ``(1 - eps) / sum_j X_ij`` over the DER block of ``X``.

    Row-sum caps bound the infinity norm only; when ``||D_cap X||_2`` still
    exceeds ``1 - eps`` every cap is shrunk by the same factor. Since ``X`` is
    entrywise nonnegative, any slopes at or below the caps then satisfy the
    spectral-norm condition too.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    idx = np.asarray(der_index, dtype=int)
    Xd = np.asarray(X, float)[np.ix_(idx, idx)]
    if neighbors_only:
        if adjacency is None:
            raise ValueError("neighbors_only needs the bus adjacency")
        mask = np.asarray(adjacency, bool)[np.ix_(idx, idx)] | np.eye(idx.size, dtype=bool)
        rows = np.where(mask, Xd, 0.0).sum(axis=1)
    else:
        rows = Xd.sum(axis=1)
    caps = (1.0 - epsilon) / rows
    norm = np.linalg.norm(caps[:, None] * Xd, 2)
    shrink = 1.0
    if norm > 1.0 - epsilon:
        shrink = (1.0 - epsilon) / norm * (1.0 - 1e-12)
        caps = caps * shrink
        norm = np.linalg.norm(caps[:, None] * Xd, 2)
    return StabilityConfig(epsilon, caps, float(norm), shrink)


def closed_loop_gain(params: VvcRuleParams, X, der_index) -> float:
    idx = np.asarray(der_index, dtype=int)
    Xd = np.asarray(X, float)[np.ix_(idx, idx)]
    return float(np.linalg.norm(params.slopes()[:, None] * Xd, 2))


def eval_params(params: VvcRuleParams, v_der):
    return eval_rule(v_der, params.v_set, params.deadband, params.ramp_end, params.q_max)


def eval_params_relu(params: VvcRuleParams, v_der):
    return eval_rule_relu(v_der, params.v_set, params.deadband, params.ramp_end, params.q_max)


def params_derivatives(params: VvcRuleParams, v_der):
    return rule_derivatives(v_der, params.v_set, params.deadband, params.ramp_end, params.q_max)


# ---------------------------------------------------------------------------
# rule parameter file: "bus v_set deadband ramp_end q_max" per line


def write_params(params: VvcRuleParams, path) -> None:
    lines = ["# bus v_set deadband ramp_end q_max"]
    for i, b in enumerate(params.buses):
        vals = (params.v_set[i], params.deadband[i], params.ramp_end[i], params.q_max[i])
        lines.append(f"{b} " + " ".join(format(float(x), ".17g") for x in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_params(path) -> VvcRuleParams:
    buses, rows = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        s = raw.split("#", 1)[0].strip()
        if not s:
            continue
        tok = s.split()
        if len(tok) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 fields")
        buses.append(int(tok[0]))
        rows.append([float(t) for t in tok[1:]])
    arr = np.array(rows, dtype=float).reshape(-1, 4)
    return VvcRuleParams(tuple(buses), *(arr[:, i].copy() for i in range(4)))

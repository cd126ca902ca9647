"""Closed-loop droop control as a single implicit layer.

The surrogate and the droop rule compose into ``F(v) = f(p, q^c - g(v))``;
equilibria are found with Anderson acceleration and the rule parameters are
trained with adjoint (implicit) gradients and projection onto the IEEE box.

Any surrogate works if it exposes ``predict(p, q)`` and ``q_jacobian(p, q)``
(the ``N x N`` sensitivity of voltages to net reactive load).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import fixed_point
from .dataset import Scenario, ScenarioSet
from .feeder import FeederModel, solve_distflow
from .fixed_point import AndersonConfig, FixedPointResult
from .rule import VvcRuleParams, eval_params_relu, params_derivatives, project_params

log = logging.getLogger(__name__)


class SingularSystem(np.linalg.LinAlgError):
    pass


class ControlLoopFailure(RuntimeError):
    pass


def rule_injection(v, params: VvcRuleParams, der_index) -> np.ndarray:
    qg = np.zeros(np.shape(v)[-1])
    qg[der_index] = eval_params_relu(params, np.asarray(v)[der_index])
    return qg


def closed_loop_map(v, scenario: Scenario, surrogate, params: VvcRuleParams, der_index):
    qg = rule_injection(v, params, der_index)
    return surrogate.predict(scenario.net_p, scenario.q_c - qg)


def solve_fixed_point(scenario: Scenario, surrogate, params: VvcRuleParams, der_index,
                      config: AndersonConfig = AndersonConfig(), v0=None) -> FixedPointResult:
    n = scenario.q_c.shape[0]
    start = np.ones(n) if v0 is None else v0
    return fixed_point.solve(lambda v: closed_loop_map(v, scenario, surrogate, params, der_index),
                             start, config)


def loss(v_star) -> float:
    d = np.asarray(v_star, dtype=float) - 1.0
    return float(d @ d)


def _pieces(v_star, scenario, surrogate, params, der_index):
    qg = rule_injection(v_star, params, der_index)
    Jq = np.asarray(surrogate.q_jacobian(scenario.net_p, scenario.q_c - qg))
    derivs = params_derivatives(params, np.asarray(v_star)[der_index])
    return Jq[:, der_index], derivs


def jacobian_v(v_star, scenario, surrogate, params, der_index) -> np.ndarray:
    """``dF/dv`` with the surrogate's relu pattern frozen at ``v_star``."""
    n = len(v_star)
    Jd, derivs = _pieces(v_star, scenario, surrogate, params, der_index)
    J = np.zeros((n, n))
    J[:, der_index] = -Jd * derivs[0]
    return J


def implicit_grad(v_star, scenario, surrogate, params, der_index):
    """Total derivative of ``||v* - 1||^2`` w.r.t. the stacked rule parameters.

    Returns ``(grad, adjoint)`` with ``grad`` laid out like
    ``VvcRuleParams.as_vector``.
    """
    v_star = np.asarray(v_star, dtype=float)
    n = v_star.size
    Jd, derivs = _pieces(v_star, scenario, surrogate, params, der_index)
    J = np.zeros((n, n))
    J[:, der_index] = -Jd * derivs[0]
    A = np.eye(n) - J
    try:
        cond = np.linalg.cond(A)
        if not np.isfinite(cond) or cond > 1e12:
            raise np.linalg.LinAlgError
        lam = np.linalg.solve(A.T, 2.0 * (v_star - 1.0))
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"I - dF/dv is singular (||dF/dv||_2 = {np.linalg.norm(J, 2):.3g})") from exc
    # dF/dphi for each parameter family is -Jd scaled column-wise by dg/dphi
    lam_J = lam @ Jd
    grad = np.concatenate([-lam_J * d for d in derivs[1:]])
    return grad, lam


@dataclass
class VvcTrainConfig:
    epochs: int = 500
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    anderson: AndersonConfig = field(default_factory=AndersonConfig)
    epsilon: float = 0.05
    use_caps: bool = True
    max_drop_fraction: float = 0.10

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("need epochs >= 0, batch_size >= 1, learning_rate > 0")


@dataclass
class VvcTrainResult:
    params: VvcRuleParams
    initial: VvcRuleParams
    log: list = field(default_factory=list)  # (epoch, mean loss, max residual, dropped)


def train_vvc(scenarios: ScenarioSet, surrogate, params0: VvcRuleParams, q_hat, der_index,
              config: VvcTrainConfig, caps=None, on_step=None) -> VvcTrainResult:
    """Projected mini-batch gradient descent on the mean equilibrium loss.

    Non-converged fixed points are dropped from their batch; an epoch in which
    more than ``max_drop_fraction`` of samples drop aborts training.
    """
    caps = caps if config.use_caps else None
    params = project_params(params0, q_hat, caps)
    initial = params
    n = len(scenarios)
    rng = np.random.default_rng(config.seed)
    trace = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses, max_res, dropped = [], 0.0, 0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            grad = np.zeros(4 * len(params))
            used = 0
            for i in batch:
                sc = scenarios[int(i)]
                fp = solve_fixed_point(sc, surrogate, params, der_index, config.anderson)
                if not fp.converged:
                    dropped += 1
                    continue
                max_res = max(max_res, fp.residual)
                try:
                    g, _ = implicit_grad(fp.v_star, sc, surrogate, params, der_index)
                except SingularSystem as exc:
                    raise SingularSystem(f"epoch {epoch}, scenario {int(i)}: {exc}") from exc
                grad += g
                losses.append(loss(fp.v_star))
                used += 1
            if used:
                vec = params.as_vector() - config.learning_rate * grad / used
                params = project_params(VvcRuleParams.from_vector(params.buses, vec), q_hat, caps)
                if on_step is not None:
                    on_step(epoch, params)
        if dropped > config.max_drop_fraction * n:
            raise ControlLoopFailure(f"epoch {epoch}: {dropped}/{n} fixed points failed to converge")
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        trace.append((epoch, mean_loss, max_res, dropped))
        if epoch % 50 == 0 or epoch == config.epochs:
            log.info("vvc epoch %d  mean loss %.5f  dropped %d", epoch, mean_loss, dropped)
    return VvcTrainResult(params, initial, trace)


def mean_equilibrium_loss(scenarios, surrogate, params, der_index, config=AndersonConfig()):
    vals = []
    for sc in scenarios:
        fp = solve_fixed_point(sc, surrogate, params, der_index, config)
        if fp.converged:
            vals.append(loss(fp.v_star))
    return float(np.mean(vals)) if vals else float("nan")


@dataclass(frozen=True, eq=False)
class ClosedLoopResult:
    voltages: np.ndarray  # (S, N) true equilibria
    residuals: np.ndarray
    converged: np.ndarray


def oracle_closed_loop(scenarios: ScenarioSet, model: FeederModel, params: VvcRuleParams | None,
                       config: AndersonConfig = AndersonConfig(tol=1e-9, max_iter=200)) -> ClosedLoopResult:
    """Equilibria of the droop rules against the exact DistFlow feeder."""
    der = model.der_index
    n_s = len(scenarios)
    V = np.empty((n_s, model.n_buses))
    res = np.zeros(n_s)
    ok = np.ones(n_s, dtype=bool)
    for i, sc in enumerate(scenarios):
        if params is None:
            V[i] = solve_distflow(model, sc.net_p, sc.q_c).v
            continue

        def F(v, sc=sc):
            return solve_distflow(model, sc.net_p, sc.q_c - rule_injection(v, params, der)).v

        fp = fixed_point.solve(F, scenarios.v[i], config)
        V[i], res[i], ok[i] = fp.v_star, fp.residual, fp.converged
        if not fp.converged:
            log.warning("closed loop did not converge for scenario %d (residual %.2e)", i, fp.residual)
    return ClosedLoopResult(V, res, ok)


def zero_rules(params: VvcRuleParams) -> VvcRuleParams:
    return replace(params, q_max=np.zeros(len(params)))

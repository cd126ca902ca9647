"""Anderson-accelerated and plain fixed-point iteration for ``x = F(x)``."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AndersonConfig:
    memory: int = 5
    relaxation: float = 1.0
    ridge: float = 1e-8
    tol: float = 1e-8
    max_iter: int = 100
    method: str = "anderson"  # or "picard"

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if not 0 < self.relaxation <= 1:
            raise ValueError("relaxation must lie in (0, 1]")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.method not in ("anderson", "picard"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass(frozen=True, eq=False)
class FixedPointResult:
    v_star: np.ndarray
    residual: float  # ||v - F(v)||_inf at v_star
    iterations: int
    converged: bool


def solve(F, x0, config: AndersonConfig = AndersonConfig()) -> FixedPointResult:
    """Iterate from ``x0``; return the first iterate whose residual is within ``tol``.

    On failure the iterate with the smallest residual seen is returned with
    ``converged=False``.
    """
    x = np.array(x0, dtype=float)
    beta = config.relaxation
    dX: deque = deque(maxlen=config.memory)
    dG: deque = deque(maxlen=config.memory)
    g = F(x) - x
    best = (np.inf, x, 0)
    x_prev = g_prev = None
    for k in range(config.max_iter + 1):
        res = float(np.max(np.abs(g))) if g.size else 0.0
        if not np.isfinite(res):
            break
        if res < best[0]:
            best = (res, x, k)
        if res <= config.tol:
            return FixedPointResult(x, res, k, True)
        if k == config.max_iter:
            break
        if x_prev is not None:
            dX.append(x - x_prev)
            dG.append(g - g_prev)
        x_prev, g_prev = x, g
        if config.method == "picard" or not dG:
            x = x + beta * g
        else:
            DG = np.column_stack(dG)
            DX = np.column_stack(dX)
            A = DG.T @ DG
            # ridge relative to the Gram scale so it stays meaningful as differences shrink
            A[np.diag_indices_from(A)] += config.ridge * max(np.trace(A) / len(dG), 1e-300)
            gamma = np.linalg.solve(A, DG.T @ g)
            x = x + beta * g - (DX + beta * DG) @ gamma
        g = F(x) - x
    res, x_best, k_best = best
    return FixedPointResult(x_best, res, k_best, False)

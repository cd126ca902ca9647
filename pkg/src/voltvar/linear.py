"""Linear power-flow baselines: LinDistFlow and a least-squares affine fit.

LinDistFlow drops the loss terms and uses ``v^2 ~ 2v - 1`` so that, with
consumption-positive loads, ``v = v0 - R p - X q`` where ``R[i, j]`` sums the
line resistance shared by the slack paths of buses ``i`` and ``j``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .feeder import FeederModel, downstream_path_sets

RIDGE = 1e-10


class SingularSystem(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class LinDistFlowModel:
    R: np.ndarray
    X: np.ndarray
    v0: float

    def predict(self, p, q):
        return predict_lindistflow(self, p, q)

    def q_jacobian(self, p, q):
        shape = np.shape(q)[:-1] + self.X.shape
        return np.broadcast_to(-self.X, shape)


@dataclass(frozen=True, eq=False)
class LsModel:
    coeffs: np.ndarray  # (N, 2N)
    intercept: np.ndarray  # (N,)

    @property
    def n_buses(self) -> int:
        return self.coeffs.shape[0]

    def predict(self, p, q):
        return predict_ls(self, p, q)

    def q_jacobian(self, p, q):
        n = self.n_buses
        shape = np.shape(q)[:-1] + (n, n)
        return np.broadcast_to(self.coeffs[:, n:], shape)


def build_lindistflow(model: FeederModel) -> LinDistFlowModel:
    paths = downstream_path_sets(model)
    imp = {(ln.from_bus, ln.to_bus): (ln.r, ln.x) for ln in model.lines}
    n = model.n_buses
    R = np.zeros((n, n))
    X = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            common = sorted(paths[i] & paths[j])
            R[i, j] = R[j, i] = sum(imp[e][0] for e in common)
            X[i, j] = X[j, i] = sum(imp[e][1] for e in common)
    return LinDistFlowModel(R, X, float(model.slack_voltage))


def predict_lindistflow(ldf: LinDistFlowModel, p, q) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return ldf.v0 - p @ ldf.R.T - q @ ldf.X.T


def fit_least_squares(inputs, outputs, ridge=RIDGE) -> LsModel:
    """Affine least-squares fit ``v ~ coeffs @ [p; q] + intercept`` on raw per-unit data.

    Solves the normal equations; falls back to a ``ridge``-regularized system
    when they are numerically singular.
    """
    X = np.asarray(inputs, dtype=float)
    Y = np.asarray(outputs, dtype=float)
    rows, d = X.shape
    if rows < d + 1:
        raise SingularSystem(f"need at least {d + 1} rows, got {rows}")
    A = np.hstack([X, np.ones((rows, 1))])
    G = A.T @ A
    rhs = A.T @ Y
    try:
        if np.linalg.cond(G) > 1e14:
            raise np.linalg.LinAlgError("ill-conditioned")
        beta = np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError:
        try:
            beta = np.linalg.solve(G + ridge * np.eye(d + 1), rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem("normal equations singular even with ridge") from exc
    if not np.all(np.isfinite(beta)):
        raise SingularSystem("non-finite least-squares coefficients")
    return LsModel(beta[:d].T.copy(), beta[d].copy())


def predict_ls(ls: LsModel, p, q) -> np.ndarray:
    x = np.concatenate([np.asarray(p, float), np.asarray(q, float)], axis=-1)
    return x @ ls.coeffs.T + ls.intercept


# ---------------------------------------------------------------------------
# plain-text matrices: "<rows> <cols>" header then row-major values


def write_matrix(path, mat, mode="w") -> None:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    with open(path, mode) as fh:
        fh.write(f"{mat.shape[0]} {mat.shape[1]}\n")
        for row in mat:
            fh.write(" ".join(format(v, ".17g") for v in row) + "\n")


def read_matrices(path) -> list[np.ndarray]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    out = []
    i = 0
    while i < len(lines):
        r, c = map(int, lines[i].split())
        block = np.array([[float(v) for v in ln.split()] for ln in lines[i + 1:i + 1 + r]])
        if block.shape != (r, c):
            raise ValueError(f"{path}: matrix block at line {i + 1} is not {r}x{c}")
        out.append(block)
        i += 1 + r
    return out


def save_lindistflow(ldf: LinDistFlowModel, path) -> None:
    write_matrix(path, ldf.R)
    write_matrix(path, ldf.X, mode="a")
    write_matrix(path, [[ldf.v0]], mode="a")


def load_lindistflow(path) -> LinDistFlowModel:
    R, X, v0 = read_matrices(path)
    return LinDistFlowModel(R, X, float(v0[0, 0]))


def save_ls(ls: LsModel, path) -> None:
    write_matrix(path, ls.coeffs)
    write_matrix(path, ls.intercept[None, :], mode="a")


def load_ls(path) -> LsModel:
    coeffs, intercept = read_matrices(path)
    return LsModel(coeffs, intercept[0])

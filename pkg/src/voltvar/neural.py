"""One-hidden-layer ReLU surrogate of the feeder's power-to-voltage map.

The network sees min-max scaled ``[p; q]`` and predicts min-max scaled
voltages; training runs plain mini-batch Adam with hand-written backprop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class DivergenceDetected(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class MinMaxScaler:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, data) -> "MinMaxScaler":
        data = np.asarray(data, dtype=float)
        return cls(data.min(axis=0), data.max(axis=0))

    @classmethod
    def identity(cls, n) -> "MinMaxScaler":
        return cls(np.zeros(n), np.ones(n))

    @property
    def span(self) -> np.ndarray:
        # degenerate features map to 0 and invert to `lo`
        width = self.hi - self.lo
        return np.where(width > 0, width, 1.0)

    @property
    def degenerate(self) -> np.ndarray:
        return ~(self.hi > self.lo)

    def scale(self, x):
        z = (np.asarray(x, dtype=float) - self.lo) / self.span
        return np.where(self.degenerate, 0.0, z)

    def descale(self, z):
        z = np.where(self.degenerate, 0.0, np.asarray(z, dtype=float))
        return z * self.span + self.lo


@dataclass(frozen=True, eq=False)
class NeuralPfModel:
    """``v = descale(W2 @ relu(W1 @ scale([p; q]) + b))``."""

    W1: np.ndarray  # (K, 2N)
    b: np.ndarray  # (K,)
    W2: np.ndarray  # (N, K)
    in_scaler: MinMaxScaler
    out_scaler: MinMaxScaler

    @property
    def n_buses(self) -> int:
        return self.W2.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def params(self):
        return self.W1, self.b, self.W2

    def with_params(self, W1, b, W2) -> "NeuralPfModel":
        return replace(self, W1=W1, b=b, W2=W2)

    def predict(self, p, q):
        return nn_forward(self, p, q)

    def q_jacobian(self, p, q):
        return nn_input_jacobian(self, p, q)[..., self.n_buses:]


def init_model(n_buses, hidden, rng, in_scaler=None, out_scaler=None, bias=0.0) -> NeuralPfModel:
    """Glorot-uniform weights and a constant hidden bias."""
    n_in = 2 * n_buses
    a1 = np.sqrt(6.0 / (n_in + hidden))
    a2 = np.sqrt(6.0 / (hidden + n_buses))
    W1 = rng.uniform(-a1, a1, size=(hidden, n_in))
    W2 = rng.uniform(-a2, a2, size=(n_buses, hidden))
    return NeuralPfModel(
        W1, np.full(hidden, float(bias)), W2,
        in_scaler or MinMaxScaler.identity(n_in),
        out_scaler or MinMaxScaler.identity(n_buses),
    )


def _inputs(p, q):
    return np.concatenate([np.asarray(p, float), np.asarray(q, float)], axis=-1)


def nn_forward(model: NeuralPfModel, p, q) -> np.ndarray:
    """Voltages for one ``(N,)`` or many ``(S, N)`` net-load vectors."""
    x = model.in_scaler.scale(_inputs(p, q))
    h = np.maximum(x @ model.W1.T + model.b, 0.0)
    return model.out_scaler.descale(h @ model.W2.T)


def hidden_preactivation(model: NeuralPfModel, p, q) -> np.ndarray:
    x = model.in_scaler.scale(_inputs(p, q))
    return x @ model.W1.T + model.b


def nn_input_jacobian(model: NeuralPfModel, p, q) -> np.ndarray:
    """d v / d [p; q] in unscaled units; relu slope taken as 0 at the kink."""
    a = hidden_preactivation(model, p, q)
    mask = (a > 0).astype(float)
    in_span = np.where(model.in_scaler.degenerate, 0.0, 1.0 / model.in_scaler.span)
    out_span = np.where(model.out_scaler.degenerate, 0.0, model.out_scaler.span)
    # (..., N, K) * (K, 2N)
    inner = (model.W2 * mask[..., None, :]) @ model.W1
    return out_span[:, None] * inner * in_span


def nn_backward(model: NeuralPfModel, x_scaled, y_scaled):
    """Loss and gradients of ``mean((W2 relu(W1 x + b) - y)^2)`` over rows and outputs.

    Inputs/targets are already in scaled space.
    """
    W1, b, W2 = model.params()
    a = x_scaled @ W1.T + b
    h = np.maximum(a, 0.0)
    err = h @ W2.T - y_scaled
    m = err.size
    loss = float(np.mean(err * err))
    g_out = (2.0 / m) * err
    gW2 = g_out.T @ h
    g_h = g_out @ W2
    g_a = g_h * (a > 0)
    gW1 = g_a.T @ x_scaled
    gb = g_a.sum(axis=0)
    return loss, (gW1, gb, gW2)


@dataclass
class PfTrainConfig:
    hidden: int = 64
    learning_rate: float = 1e-3
    epochs: int = 2000
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 0.01  # final lr as a fraction of the initial (cosine schedule); 1.0 = constant
    # "data": each hidden kink passes through a random training point; a number sets a constant bias
    bias_init: str | float = "data"
    log_every: int = 100

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.hidden < 1 or self.epochs < 0:
            raise ValueError("batch_size and hidden must be >= 1, epochs >= 0")
        parse_bias_init(self.bias_init)


def parse_bias_init(value):
    """``"data"`` or a float; anything else raises ``ValueError``."""
    if isinstance(value, str) and value.strip().lower() == "data":
        return "data"
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ValueError(f"bias_init must be 'data' or a number, got {value!r}") from None


@dataclass
class TrainResult:
    model: NeuralPfModel
    curve: list = field(default_factory=list)  # (epoch, mean scaled training loss)


def train_pf(train_inputs, train_outputs, config: PfTrainConfig) -> TrainResult:
    """Fit scalers on the training split, then run seeded mini-batch Adam."""
    X = np.asarray(train_inputs, dtype=float)
    Y = np.asarray(train_outputs, dtype=float)
    n = Y.shape[1]
    rng = np.random.default_rng(config.seed)
    in_s, out_s = MinMaxScaler.fit(X), MinMaxScaler.fit(Y)
    bias = parse_bias_init(config.bias_init)
    model = init_model(n, config.hidden, rng, in_s, out_s, 0.0 if bias == "data" else bias)
    xs, ys = in_s.scale(X), out_s.scale(Y)
    if bias == "data":
        # a constant bias leaves every unit active on the whole box, i.e. an affine start
        # that sits on the least-squares plateau; anchoring the kinks inside the data avoids it
        anchors = xs[rng.integers(0, xs.shape[0], config.hidden)]
        model = model.with_params(model.W1, -(model.W1 * anchors).sum(axis=1), model.W2)

    params = [p.copy() for p in model.params()]
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2, eps = config.beta1, config.beta2, config.eps
    rows = xs.shape[0]
    bs = min(config.batch_size, rows)
    curve = []
    step = 0
    total_steps = config.epochs * -(-rows // bs)
    init_loss, _ = nn_backward(model, xs, ys)
    curve.append((0, init_loss))
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(rows)
        for start in range(0, rows, bs):
            idx = perm[start:start + bs]
            cur = model.with_params(*params)
            loss, grads = nn_backward(cur, xs[idx], ys[idx])
            if not np.isfinite(loss):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch}")
            step += 1
            frac = (step - 1) / max(total_steps - 1, 1)
            lr = config.learning_rate * (
                config.lr_decay + (1 - config.lr_decay) * 0.5 * (1 + np.cos(np.pi * frac))
            )
            c1 = 1 - b1**step
            c2 = 1 - b2**step
            for p, g, s1, s2 in zip(params, grads, m1, m2):
                s1 *= b1
                s1 += (1 - b1) * g
                s2 *= b2
                s2 += (1 - b2) * g * g
                p -= lr * (s1 / c1) / (np.sqrt(s2 / c2) + eps)
        if epoch % config.log_every == 0 or epoch == config.epochs:
            full, _ = nn_backward(model.with_params(*params), xs, ys)
            if not np.isfinite(full):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch}")
            curve.append((epoch, full))
            log.info("epoch %d  scaled mse %.3e", epoch, full)
    return TrainResult(model.with_params(*params), curve)


def mse_eval(predict, inputs, outputs) -> float:
    """Mean squared voltage error over all rows and buses, in unscaled per-unit."""
    X = np.asarray(inputs, dtype=float)
    Y = np.asarray(outputs, dtype=float)
    if Y.size == 0:
        raise ValueError("empty split")
    n = Y.shape[1]
    pred = predict(X[:, :n], X[:, n:])
    return float(np.mean((pred - Y) ** 2))


# ---------------------------------------------------------------------------
# checkpoints


def _row(values) -> str:
    return " ".join(format(float(v), ".17g") for v in np.ravel(values))


def save_model(model: NeuralPfModel, path) -> None:
    n, k = model.n_buses, model.hidden
    out = [
        f"neural_pf N={n} K={k}",
        "in_lo " + _row(model.in_scaler.lo),
        "in_hi " + _row(model.in_scaler.hi),
        "out_lo " + _row(model.out_scaler.lo),
        "out_hi " + _row(model.out_scaler.hi),
        f"W1 {k} {2 * n}",
        *(_row(r) for r in model.W1),
        f"b {k}",
        _row(model.b),
        f"W2 {n} {k}",
        *(_row(r) for r in model.W2),
    ]
    Path(path).write_text("\n".join(out) + "\n")


def load_model(path) -> NeuralPfModel:
    lines = Path(path).read_text().splitlines()
    head = dict(tok.split("=") for tok in lines[0].split()[1:])
    n, k = int(head["N"]), int(head["K"])

    def vec(line, tag):
        name, *vals = line.split()
        if name != tag:
            raise ValueError(f"{path}: expected '{tag}' block, got '{name}'")
        return np.array([float(v) for v in vals])

    in_lo, in_hi = vec(lines[1], "in_lo"), vec(lines[2], "in_hi")
    out_lo, out_hi = vec(lines[3], "out_lo"), vec(lines[4], "out_hi")
    W1 = np.array([[float(v) for v in ln.split()] for ln in lines[6:6 + k]])
    b = np.array([float(v) for v in lines[7 + k].split()])
    W2 = np.array([[float(v) for v in ln.split()] for ln in lines[9 + k:9 + k + n]])
    if W1.shape != (k, 2 * n) or b.shape != (k,) or W2.shape != (n, k):
        raise ValueError(f"{path}: weight blocks do not match N={n} K={k}")
    return NeuralPfModel(W1, b, W2, MinMaxScaler(in_lo, in_hi), MinMaxScaler(out_lo, out_hi))

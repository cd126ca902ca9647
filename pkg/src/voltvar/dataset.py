"""Seeded dataset generation from the DistFlow oracle, CSV I/O and splitting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .feeder import FeederModel, NonConvergence, VoltageCollapse, solve_distflow


class MalformedRow(ValueError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class WidthMismatch(MalformedRow):
    pass


@dataclass(eq=False)
class PfDataset:
    inputs: np.ndarray  # (S, 2N) consumption-positive [p; q]
    outputs: np.ndarray  # (S, N) voltage magnitudes
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def n_buses(self) -> int:
        return self.outputs.shape[1]

    @property
    def p(self):
        return self.inputs[:, :self.n_buses]

    @property
    def q(self):
        return self.inputs[:, self.n_buses:]

    def subset(self, idx) -> "PfDataset":
        idx = np.asarray(idx, dtype=int)
        return PfDataset(self.inputs[idx], self.outputs[idx], dict(self.metadata))

    def __eq__(self, other):
        return (
            isinstance(other, PfDataset)
            and self.inputs.shape == other.inputs.shape
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.outputs, other.outputs)
        )


@dataclass(frozen=True)
class PerturbSpec:
    relative_range: float = 0.10
    q_offset_range: tuple[float, float] = (-0.8, 0.2)
    q_offset_nodes: tuple[int, ...] | None = None  # None: the feeder's DER buses

    def __post_init__(self):
        if self.relative_range < 0:
            raise ValueError("relative_range must be >= 0")
        lo, hi = self.q_offset_range
        if not lo <= hi:
            raise ValueError("q_offset_range must be an interval")


@dataclass(frozen=True, eq=False)
class Scenario:
    p_c: np.ndarray
    p_g: np.ndarray
    q_c: np.ndarray

    @property
    def net_p(self):
        return self.p_c - self.p_g


@dataclass(eq=False)
class ScenarioSet:
    p_c: np.ndarray  # (S, N)
    p_g: np.ndarray
    q_c: np.ndarray
    v: np.ndarray  # uncorrected oracle voltages
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return self.p_c.shape[0]

    def __getitem__(self, i) -> Scenario:
        return Scenario(self.p_c[i], self.p_g[i], self.q_c[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "ScenarioSet":
        idx = np.asarray(idx, dtype=int)
        return ScenarioSet(self.p_c[idx], self.p_g[idx], self.q_c[idx], self.v[idx], dict(self.metadata))

    def as_pf_dataset(self) -> PfDataset:
        return PfDataset(np.hstack([self.p_c - self.p_g, self.q_c]), self.v, dict(self.metadata))

    @classmethod
    def from_pf_dataset(cls, ds: PfDataset) -> "ScenarioSet":
        return cls(ds.p.copy(), np.zeros_like(ds.p), ds.q.copy(), ds.outputs.copy(), dict(ds.metadata))


def _sample_stream(seed: int, index: int) -> np.random.Generator:
    # one independent stream per sample index: output does not depend on how work is split
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def _oracle(model, p, q, first_index=0):
    try:
        return solve_distflow(model, p, q).v
    except (NonConvergence, VoltageCollapse) as exc:
        idx = None if exc.sample is None else first_index + exc.sample
        raise type(exc)(f"sample {idx}: {exc}", sample=idx) from exc


def gen_pf_dataset(model: FeederModel, n_samples: int, spec: PerturbSpec = PerturbSpec(),
                   seed: int = 0) -> PfDataset:
    """Dataset-1: +/- perturbed demand plus an additive reactive offset per configured bus."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n = model.n_buses
    nodes = model.der_nodes if spec.q_offset_nodes is None else spec.q_offset_nodes
    cols = np.asarray(nodes, dtype=int) - 1
    lo, hi = spec.q_offset_range
    rr = spec.relative_range
    P = np.empty((n_samples, n))
    Q = np.empty((n_samples, n))
    for i in range(n_samples):
        rng = _sample_stream(seed, i)
        P[i] = model.nominal_p * rng.uniform(1 - rr, 1 + rr, n)
        Q[i] = model.nominal_q * rng.uniform(1 - rr, 1 + rr, n)
        if cols.size:
            Q[i, cols] += rng.uniform(lo, hi, cols.size)
    V = _oracle(model, P, Q)
    meta = {
        "kind": "pf",
        "seed": int(seed),
        "n_samples": n_samples,
        "relative_range": rr,
        "q_offset_range": f"{lo!r},{hi!r}",
        "q_offset_nodes": ",".join(str(b) for b in nodes),
        "feeder": model.name,
        "feeder_hash": model.fingerprint(),
    }
    return PfDataset(np.hstack([P, Q]), V, meta)


def gen_scenario_dataset(model: FeederModel, n_samples: int, seed: int = 0,
                         relative_range: float = 0.10) -> ScenarioSet:
    """Dataset-2: demand perturbation only, ``p^g = 0``, uncorrected voltages attached."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n = model.n_buses
    P = np.empty((n_samples, n))
    Q = np.empty((n_samples, n))
    for i in range(n_samples):
        rng = _sample_stream(seed, i)
        P[i] = model.nominal_p * rng.uniform(1 - relative_range, 1 + relative_range, n)
        Q[i] = model.nominal_q * rng.uniform(1 - relative_range, 1 + relative_range, n)
    V = _oracle(model, P, Q)
    meta = {
        "kind": "scenarios",
        "seed": int(seed),
        "n_samples": n_samples,
        "relative_range": relative_range,
        "feeder": model.name,
        "feeder_hash": model.fingerprint(),
    }
    return ScenarioSet(P, np.zeros_like(P), Q, V, meta)


def split_80_20(n_rows: int, policy: str = "ordered", seed: int = 0):
    """Index arrays ``(train, test)``; ``ordered`` keeps the first 80% for training."""
    if n_rows < 5:
        raise ValueError("need at least 5 rows to split")
    n_train = (4 * n_rows) // 5
    if policy == "ordered":
        idx = np.arange(n_rows)
    elif policy == "shuffle":
        idx = np.random.default_rng(seed).permutation(n_rows)
    else:
        raise ValueError(f"unknown split policy {policy!r}")
    return idx[:n_train], idx[n_train:]


# ---------------------------------------------------------------------------
# CSV files with a key=value metadata sidecar


def _fmt(v) -> str:
    return format(float(v), ".17g")


def header_for(n: int) -> list[str]:
    return ([f"p_{i}" for i in range(1, n + 1)] + [f"q_{i}" for i in range(1, n + 1)]
            + [f"v_{i}" for i in range(1, n + 1)])


def write_csv(ds: PfDataset, path) -> None:
    path = Path(path)
    n = ds.n_buses
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header_for(n))
        for x, y in zip(ds.inputs, ds.outputs):
            w.writerow([_fmt(v) for v in x] + [_fmt(v) for v in y])
    if ds.metadata:
        write_metadata(ds.metadata, meta_path(path))


def read_csv(path) -> PfDataset:
    path = Path(path)
    rows = []
    width = None
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
                if width % 3:
                    raise WidthMismatch(lineno, f"header has {width} columns, not a multiple of 3")
                if row != header_for(width // 3):
                    raise MalformedRow(lineno, "unexpected header")
                continue
            if len(row) != width:
                raise WidthMismatch(lineno, f"expected {width} fields, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise MalformedRow(lineno, str(exc)) from exc
    meta = read_metadata(meta_path(path)) if meta_path(path).exists() else {}
    if width is None:
        return PfDataset(np.zeros((0, 0)), np.zeros((0, 0)), meta)
    n = width // 3
    arr = np.array(rows, dtype=float).reshape(-1, width)
    return PfDataset(arr[:, :2 * n], arr[:, 2 * n:], meta)


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def write_metadata(meta: dict, path) -> None:
    Path(path).write_text("".join(f"{k}={meta[k]}\n" for k in sorted(meta)))


def read_metadata(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out

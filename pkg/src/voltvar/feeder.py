"""Radial feeder model, the IEEE 33-bus test case, and an exact DistFlow solver.

Buses are numbered ``0..N`` with bus 0 the slack (substation). Every per-bus
vector in this package has length ``N`` and is indexed by ``bus - 1``.
Loads are consumption-positive: ``p = p^c - p^g`` and ``q = q^c - q^g``.
"""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

BASE_KV = 12.66
BASE_MVA = 1.0

# Baran & Wu (1989) 33-bus feeder, 1-based buses:
# (from, to, r [ohm], x [ohm], p [kW] at `to`, q [kVAr] at `to`)
IEEE33_BRANCHES = (
    (1, 2, 0.0922, 0.0470, 100.0, 60.0),
    (2, 3, 0.4930, 0.2511, 90.0, 40.0),
    (3, 4, 0.3660, 0.1864, 120.0, 80.0),
    (4, 5, 0.3811, 0.1941, 60.0, 30.0),
    (5, 6, 0.8190, 0.7070, 60.0, 20.0),
    (6, 7, 0.1872, 0.6188, 200.0, 100.0),
    (7, 8, 0.7114, 0.2351, 200.0, 100.0),
    (8, 9, 1.0300, 0.7400, 60.0, 20.0),
    (9, 10, 1.0440, 0.7400, 60.0, 20.0),
    (10, 11, 0.1966, 0.0650, 45.0, 30.0),
    (11, 12, 0.3744, 0.1238, 60.0, 35.0),
    (12, 13, 1.4680, 1.1550, 60.0, 35.0),
    (13, 14, 0.5416, 0.7129, 120.0, 80.0),
    (14, 15, 0.5910, 0.5260, 60.0, 10.0),
    (15, 16, 0.7463, 0.5450, 60.0, 20.0),
    (16, 17, 1.2890, 1.7210, 60.0, 20.0),
    (17, 18, 0.7320, 0.5740, 90.0, 40.0),
    (2, 19, 0.1640, 0.1565, 90.0, 40.0),
    (19, 20, 1.5042, 1.3554, 90.0, 40.0),
    (20, 21, 0.4095, 0.4784, 90.0, 40.0),
    (21, 22, 0.7089, 0.9373, 90.0, 40.0),
    (3, 23, 0.4512, 0.3083, 90.0, 50.0),
    (23, 24, 0.8980, 0.7091, 420.0, 200.0),
    (24, 25, 0.8960, 0.7011, 420.0, 200.0),
    (6, 26, 0.2030, 0.1034, 60.0, 25.0),
    (26, 27, 0.2842, 0.1447, 60.0, 25.0),
    (27, 28, 1.0590, 0.9337, 60.0, 20.0),
    (28, 29, 0.8042, 0.7006, 120.0, 70.0),
    (29, 30, 0.5075, 0.2585, 200.0, 600.0),
    (30, 31, 0.9744, 0.9630, 150.0, 70.0),
    (31, 32, 0.3105, 0.3619, 210.0, 100.0),
    (32, 33, 0.3410, 0.5302, 60.0, 40.0),
)

# Injection-positive reactive output: up to 0.6 p.u. of support, 0.1 p.u. of absorption.
DEFAULT_QG_MIN = -0.1
DEFAULT_QG_MAX = 0.6


class FeederError(ValueError):
    pass


class NonConvergence(RuntimeError):
    def __init__(self, message, sample=None):
        super().__init__(message)
        self.sample = sample


class VoltageCollapse(RuntimeError):
    def __init__(self, message, sample=None):
        super().__init__(message)
        self.sample = sample


@dataclass(frozen=True)
class LineSegment:
    from_bus: int
    to_bus: int
    r: float
    x: float


@dataclass(frozen=True, eq=False)
class FeederModel:
    """Immutable radial feeder.

    ``qg_min``/``qg_max`` are per-DER reactive generation limits aligned with
    ``der_nodes``; ``nominal_p``/``nominal_q`` are per-bus consumption.
    """

    n_buses: int
    slack_voltage: float
    lines: tuple[LineSegment, ...]
    der_nodes: tuple[int, ...]
    qg_min: np.ndarray
    qg_max: np.ndarray
    nominal_p: np.ndarray
    nominal_q: np.ndarray
    name: str = field(default="feeder")

    @cached_property
    def topology(self) -> "Topology":
        report = validate_radial(self)
        if report:
            raise FeederError("feeder is not radial: " + "; ".join(map(str, report)))
        return Topology.build(self)

    @property
    def der_index(self) -> np.ndarray:
        """Zero-based vector positions of the DER buses."""
        return np.asarray(self.der_nodes, dtype=int) - 1

    @property
    def q_capability(self) -> np.ndarray:
        """Per-DER reactive capability used as the droop-rule ``q_max`` ceiling."""
        return np.maximum(np.abs(self.qg_min), np.abs(self.qg_max))

    def with_ders(self, der_nodes, qg_min=DEFAULT_QG_MIN, qg_max=DEFAULT_QG_MAX) -> "FeederModel":
        der_nodes = tuple(int(b) for b in der_nodes)
        k = len(der_nodes)
        return FeederModel(
            n_buses=self.n_buses,
            slack_voltage=self.slack_voltage,
            lines=self.lines,
            der_nodes=der_nodes,
            qg_min=np.broadcast_to(np.asarray(qg_min, float), (k,)).copy(),
            qg_max=np.broadcast_to(np.asarray(qg_max, float), (k,)).copy(),
            nominal_p=self.nominal_p,
            nominal_q=self.nominal_q,
            name=self.name,
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.n_buses} {self.slack_voltage!r}".encode())
        for ln in self.lines:
            h.update(f"{ln.from_bus} {ln.to_bus} {ln.r!r} {ln.x!r}".encode())
        for arr in (self.nominal_p, self.nominal_q, self.qg_min, self.qg_max):
            h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
        h.update(repr(self.der_nodes).encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class Topology:
    """Precomputed sweep orderings. Line ``k`` in the arrays feeds bus ``to[k]``."""

    parent: np.ndarray  # parent bus of each bus 1..N, indexed by bus-1
    r: np.ndarray  # impedance of the line feeding each bus, indexed by bus-1
    x: np.ndarray
    order: tuple[int, ...]  # buses 1..N in breadth-first order from the slack
    children: tuple[tuple[int, ...], ...]  # children of bus 0..N

    @classmethod
    def build(cls, model: FeederModel) -> "Topology":
        n = model.n_buses
        parent = np.zeros(n, dtype=int)
        r = np.zeros(n)
        x = np.zeros(n)
        children: list[list[int]] = [[] for _ in range(n + 1)]
        for ln in model.lines:
            parent[ln.to_bus - 1] = ln.from_bus
            r[ln.to_bus - 1] = ln.r
            x[ln.to_bus - 1] = ln.x
            children[ln.from_bus].append(ln.to_bus)
        order = []
        queue = deque([0])
        while queue:
            b = queue.popleft()
            for c in children[b]:
                order.append(c)
                queue.append(c)
        return cls(parent, r, x, tuple(order), tuple(tuple(c) for c in children))


@dataclass(frozen=True)
class Violation:
    kind: str  # "cycle" | "disconnected" | "duplicate_parent" | "bad_line" | "bad_der"
    detail: str

    def __str__(self):
        return f"{self.kind}: {self.detail}"


def validate_radial(model: FeederModel) -> list[Violation]:
    """Return every violation of the slack-rooted tree property (empty when valid)."""
    n = model.n_buses
    out: list[Violation] = []
    parents: dict[int, list[int]] = {}
    adj: dict[int, list[int]] = {b: [] for b in range(n + 1)}
    for ln in model.lines:
        if ln.from_bus == ln.to_bus:
            out.append(Violation("bad_line", f"self loop at bus {ln.from_bus}"))
            continue
        if not (0 <= ln.from_bus <= n and 0 <= ln.to_bus <= n):
            out.append(Violation("bad_line", f"line {ln.from_bus}-{ln.to_bus} out of range"))
            continue
        if ln.r < 0 or ln.x < 0:
            out.append(Violation("bad_line", f"negative impedance on {ln.from_bus}-{ln.to_bus}"))
        if ln.to_bus == 0:
            out.append(Violation("bad_line", f"line {ln.from_bus}-0 feeds the slack"))
        parents.setdefault(ln.to_bus, []).append(ln.from_bus)
        adj[ln.from_bus].append(ln.to_bus)
        adj[ln.to_bus].append(ln.from_bus)
    for b, ps in sorted(parents.items()):
        if len(ps) > 1:
            out.append(Violation("duplicate_parent", f"bus {b} fed by {sorted(ps)}"))

    # undirected search: count edges revisiting a seen bus as cycles
    seen = {0}
    stack = [(0, -1)]
    back_edges = 0
    while stack:
        b, via = stack.pop()
        skipped_parent = False
        for nb in adj[b]:
            if nb == via and not skipped_parent:
                skipped_parent = True
                continue
            if nb in seen:
                back_edges += 1
                continue
            seen.add(nb)
            stack.append((nb, b))
    if back_edges:
        out.append(Violation("cycle", f"{back_edges // 2 or 1} redundant line(s) close a loop"))
    missing = [b for b in range(1, n + 1) if b not in seen]
    if missing:
        out.append(Violation("disconnected", f"buses {missing} unreachable from slack"))
    for b in model.der_nodes:
        if not 1 <= b <= n:
            out.append(Violation("bad_der", f"DER bus {b} out of range"))
    if np.any(np.asarray(model.qg_min) > 0) or np.any(np.asarray(model.qg_max) < 0):
        out.append(Violation("bad_der", "qg bounds must bracket zero"))
    return out


def downstream_path_sets(model: FeederModel) -> list[frozenset[tuple[int, int]]]:
    """For bus ``i`` (list index ``i-1``), the lines on the slack-to-``i`` path."""
    topo = model.topology
    paths: dict[int, frozenset] = {0: frozenset()}
    for b in topo.order:
        p = int(topo.parent[b - 1])
        paths[b] = paths[p] | {(p, b)}
    return [paths[b] for b in range(1, model.n_buses + 1)]


def build_ieee33(der_nodes=None, qg_min=DEFAULT_QG_MIN, qg_max=DEFAULT_QG_MAX) -> FeederModel:
    """IEEE 33-bus feeder in per-unit on a 1 MVA / 12.66 kV base.

    By default every load bus carries an inverter with injection-positive ``q^g`` in [-0.1, 0.6].
    """
    z_base = BASE_KV**2 / BASE_MVA
    lines = []
    p = np.zeros(32)
    q = np.zeros(32)
    for f, t, r, x, pk, qk in IEEE33_BRANCHES:
        lines.append(LineSegment(f - 1, t - 1, r / z_base, x / z_base))
        p[t - 2] = pk / 1000.0 / BASE_MVA
        q[t - 2] = qk / 1000.0 / BASE_MVA
    n = 32
    ders = tuple(range(1, n + 1)) if der_nodes is None else tuple(der_nodes)
    base = FeederModel(
        n_buses=n,
        slack_voltage=1.0,
        lines=tuple(lines),
        der_nodes=(),
        qg_min=np.zeros(0),
        qg_max=np.zeros(0),
        nominal_p=p,
        nominal_q=q,
        name="ieee33",
    )
    return base.with_ders(ders, qg_min, qg_max)


# ---------------------------------------------------------------------------
# feeder text files


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_feeder(model: FeederModel, path) -> None:
    lines = [
        f"# {model.name}: from to r_pu x_pu p_c q_c (p_c, q_c at the `to` bus)",
        f"buses={model.n_buses} v0={_fmt(model.slack_voltage)}",
    ]
    for ln in sorted(model.lines, key=lambda s: s.to_bus):
        i = ln.to_bus - 1
        lines.append(
            " ".join(
                [str(ln.from_bus), str(ln.to_bus), _fmt(ln.r), _fmt(ln.x),
                 _fmt(model.nominal_p[i]), _fmt(model.nominal_q[i])]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def parse_feeder(text: str, name="feeder", der_nodes=None,
                 qg_min=DEFAULT_QG_MIN, qg_max=DEFAULT_QG_MAX) -> FeederModel:
    n = v0 = None
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        s = raw.split("#", 1)[0].strip()
        if not s:
            continue
        if n is None:
            try:
                kv = dict(tok.split("=", 1) for tok in s.split())
                n, v0 = int(kv["buses"]), float(kv["v0"])
            except (ValueError, KeyError) as exc:
                raise FeederError(f"line {lineno}: expected header 'buses=<N> v0=<v0>'") from exc
            continue
        tok = s.split()
        if len(tok) != 6:
            raise FeederError(f"line {lineno}: expected 6 fields, got {len(tok)}")
        try:
            rows.append((int(tok[0]), int(tok[1]), *map(float, tok[2:])))
        except ValueError as exc:
            raise FeederError(f"line {lineno}: {exc}") from exc
    if n is None:
        raise FeederError("missing header line")
    p = np.zeros(n)
    q = np.zeros(n)
    lines = []
    for f, t, r, x, pc, qc in rows:
        lines.append(LineSegment(f, t, r, x))
        if 1 <= t <= n:
            p[t - 1], q[t - 1] = pc, qc
    if np.any(p < 0) or np.any(q < 0):
        raise FeederError("nominal loads must be consumption-positive")
    ders = tuple(range(1, n + 1)) if der_nodes is None else tuple(der_nodes)
    base = FeederModel(n, v0, tuple(lines), (), np.zeros(0), np.zeros(0), p, q, name)
    model = base.with_ders(ders, qg_min, qg_max)
    report = validate_radial(model)
    if report:
        raise FeederError("; ".join(map(str, report)))
    return model


def read_feeder(path, **kwargs) -> FeederModel:
    path = Path(path)
    return parse_feeder(path.read_text(), name=kwargs.pop("name", path.stem), **kwargs)


def ieee33_data_text() -> str:
    """The shipped per-unit copy of the 33-bus table."""
    return resources.files("voltvar.data").joinpath("ieee33.txt").read_text()


# ---------------------------------------------------------------------------
# DistFlow backward/forward sweep


@dataclass(frozen=True, eq=False)
class DistFlowSolution:
    """Branch-flow state. ``P``, ``Q``, ``l`` are indexed by the bus each line feeds."""

    v: np.ndarray
    u: np.ndarray  # squared voltage magnitudes
    P: np.ndarray
    Q: np.ndarray
    l: np.ndarray  # squared current magnitudes
    sweeps: np.ndarray
    residual: np.ndarray


def solve_distflow(model: FeederModel, net_p, net_q, tol=1e-10, max_sweeps=200) -> DistFlowSolution:
    """Solve single-phase DistFlow with losses by backward/forward sweep.

    ``net_p``/``net_q`` are consumption-positive, shape ``(N,)`` or ``(S, N)``
    for ``S`` independent scenarios. Each scenario is iterated (and frozen)
    on its own, so batched and one-at-a-time results are bit-identical.
    """
    p = np.asarray(net_p, dtype=float)
    q = np.asarray(net_q, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    q = np.atleast_2d(q)
    n = model.n_buses
    if p.shape != q.shape or p.shape[1] != n:
        raise ValueError(f"expected net loads of length {n}, got {p.shape} and {q.shape}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise ValueError("net loads must be finite")

    topo = model.topology
    order = topo.order
    rev = order[::-1]
    par = topo.parent
    r, x = topo.r, topo.x
    z2 = r * r + x * x
    u0 = model.slack_voltage**2
    s_total = p.shape[0]

    U = np.full((s_total, n + 1), u0)  # column 0 is the slack
    P = np.zeros((s_total, n))
    Q = np.zeros((s_total, n))
    L = np.zeros((s_total, n))
    sweeps = np.zeros(s_total, dtype=int)
    res_out = np.zeros(s_total)
    active = np.arange(s_total)

    for it in range(1, max_sweeps + 1):
        pa, qa, la = p[active], q[active], L[active]
        ua = U[active]
        Pa = np.empty_like(pa)
        Qa = np.empty_like(qa)
        for b in rev:
            j = b - 1
            acc_p = pa[:, j] + r[j] * la[:, j]
            acc_q = qa[:, j] + x[j] * la[:, j]
            for c in topo.children[b]:
                acc_p = acc_p + Pa[:, c - 1]
                acc_q = acc_q + Qa[:, c - 1]
            Pa[:, j] = acc_p
            Qa[:, j] = acc_q
        un = np.empty_like(ua)
        un[:, 0] = u0
        for b in order:
            j = b - 1
            i = par[j]
            un[:, b] = un[:, i] - 2.0 * (r[j] * Pa[:, j] + x[j] * Qa[:, j]) + z2[j] * la[:, j]
            bad = un[:, b] <= 0.0
            if np.any(bad):
                s = int(active[np.argmax(bad)])
                raise VoltageCollapse(f"squared voltage at bus {b} fell to zero (sample {s})", sample=s)
        lnew = (Pa * Pa + Qa * Qa) / un[:, par]
        du = np.max(np.abs(un - ua), axis=1)
        dl = np.max(np.abs(lnew - la), axis=1)
        P[active], Q[active], U[active], L[active] = Pa, Qa, un, lnew
        sweeps[active] = it
        if not np.all(np.isfinite(un)):
            raise NonConvergence("sweep diverged", sample=int(active[0]))
        done = (du <= tol) & (dl <= tol)
        if np.any(done):
            # one more sweep with the settled losses makes all four equation families consistent
            idx = active[done]
            P[idx], Q[idx], U[idx] = _final_sweep(topo, p[idx], q[idx], L[idx], u0)
            res_out[idx] = distflow_residual(model, U[idx], P[idx], Q[idx], L[idx], p[idx], q[idx])
            active = active[~done]
        if active.size == 0:
            break
    else:
        raise NonConvergence(f"DistFlow sweep did not converge in {max_sweeps} sweeps",
                             sample=int(active[0]))

    v = np.sqrt(U[:, 1:])
    if single:
        return DistFlowSolution(v[0], U[0, 1:], P[0], Q[0], L[0], sweeps[0], res_out[0])
    return DistFlowSolution(v, U[:, 1:], P, Q, L, sweeps, res_out)


def _final_sweep(topo, p, q, L, u0):
    n = p.shape[1]
    P = np.empty_like(p)
    Q = np.empty_like(q)
    r, x = topo.r, topo.x
    for b in topo.order[::-1]:
        j = b - 1
        acc_p = p[:, j] + r[j] * L[:, j]
        acc_q = q[:, j] + x[j] * L[:, j]
        for c in topo.children[b]:
            acc_p = acc_p + P[:, c - 1]
            acc_q = acc_q + Q[:, c - 1]
        P[:, j] = acc_p
        Q[:, j] = acc_q
    U = np.empty((p.shape[0], n + 1))
    U[:, 0] = u0
    z2 = r * r + x * x
    for b in topo.order:
        j = b - 1
        U[:, b] = U[:, topo.parent[j]] - 2.0 * (r[j] * P[:, j] + x[j] * Q[:, j]) + z2[j] * L[:, j]
    return P, Q, U


def distflow_residual(model, U, P, Q, L, p, q) -> np.ndarray:
    """Max absolute violation of the DistFlow branch equations per scenario.

    ``U`` includes the slack in column 0 (``(S, N+1)``) and the rest are ``(S, N)``.
    """
    topo = model.topology
    U, P, Q, L = (np.atleast_2d(a) for a in (U, P, Q, L))
    p, q = np.atleast_2d(p), np.atleast_2d(q)
    r, x = topo.r, topo.x
    child_p = np.zeros_like(P)
    child_q = np.zeros_like(Q)
    for ln_to in range(1, model.n_buses + 1):
        i = topo.parent[ln_to - 1]
        if i > 0:
            child_p[:, i - 1] += P[:, ln_to - 1]
            child_q[:, i - 1] += Q[:, ln_to - 1]
    u_from = U[:, topo.parent]
    res = [
        P - r * L - child_p - p,
        Q - x * L - child_q - q,
        L - (P * P + Q * Q) / u_from,
        U[:, 1:] - u_from + 2.0 * (r * P + x * Q) - (r * r + x * x) * L,
    ]
    return np.max(np.abs(np.concatenate(res, axis=1)), axis=1)

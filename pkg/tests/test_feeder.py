import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_feeder
from voltvar.feeder import (
    FeederError,
    FeederModel,
    LineSegment,
    VoltageCollapse,
    build_ieee33,
    downstream_path_sets,
    ieee33_data_text,
    parse_feeder,
    read_feeder,
    solve_distflow,
    validate_radial,
    write_feeder,
)


def two_bus(r, x):
    return FeederModel(1, 1.0, (LineSegment(0, 1, r, x),), (1,), np.array([-0.1]), np.array([0.6]),
                       np.zeros(1), np.zeros(1))


def bisect_two_bus(r, x, p, q, v0=1.0):
    """High-voltage root of u^2 + (2(rp + xq) - v0^2) u + (r^2 + x^2)(p^2 + q^2) = 0 with u = |V|^2."""
    b = 2 * (r * p + x * q) - v0**2
    c = (r * r + x * x) * (p * p + q * q)
    f = lambda u: u * u + b * u + c  # noqa: E731
    lo, hi = -b / 2, v0**2 * 4
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            hi = mid
        else:
            lo = mid
    return np.sqrt(0.5 * (lo + hi))


@pytest.mark.parametrize("r,x,p,q", [(0.01, 0.02, 0.5, 0.3), (0.05, 0.03, 1.0, -0.4), (0.02, 0.02, -0.3, 0.2)])
def test_two_bus_matches_quadratic_root(r, x, p, q):
    sol = solve_distflow(two_bus(r, x), np.array([p]), np.array([q]))
    assert sol.v[0] == pytest.approx(bisect_two_bus(r, x, p, q), abs=1e-10)


def test_two_bus_collapse():
    with pytest.raises(VoltageCollapse):
        solve_distflow(two_bus(0.3, 0.3), np.array([3.0]), np.array([3.0]))


def test_ieee33_nominal(ieee33):
    sol = solve_distflow(ieee33, ieee33.nominal_p, ieee33.nominal_q)
    assert sol.v.min() == pytest.approx(0.91309, abs=5e-5)
    assert int(np.argmin(sol.v)) == 16  # bus 17, end of the main lateral (slack is bus 0)
    assert ieee33.nominal_p.sum() == pytest.approx(3.715)
    assert ieee33.nominal_q.sum() == pytest.approx(2.3)
    assert sol.residual.max() <= 1e-10


def test_zero_load_is_flat(ieee33):
    sol = solve_distflow(ieee33, np.zeros(32), np.zeros(32))
    assert np.array_equal(sol.v, np.ones(32))


def test_batch_matches_single(ieee33):
    rng = np.random.default_rng(3)
    P = ieee33.nominal_p * rng.uniform(0.5, 1.5, (6, 32))
    Q = ieee33.nominal_q * rng.uniform(0.5, 1.5, (6, 32))
    batch = solve_distflow(ieee33, P, Q).v
    for i in range(6):
        assert np.array_equal(batch[i], solve_distflow(ieee33, P[i], Q[i]).v)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 20))
def test_random_feeders_residual(seed, n):
    rng = np.random.default_rng(seed)
    model = random_feeder(rng, n)
    sol = solve_distflow(model, model.nominal_p, model.nominal_q)
    assert sol.residual.max() <= 1e-10
    assert np.all(sol.v < 1.0)


def test_more_load_lowers_voltage(ieee33):
    base = solve_distflow(ieee33, ieee33.nominal_p, ieee33.nominal_q).v
    p = ieee33.nominal_p.copy()
    p[10] += 0.1
    assert np.all(solve_distflow(ieee33, p, ieee33.nominal_q).v <= base)


def test_validate_radial_kinds():
    ok = [LineSegment(0, 1, 0.1, 0.1), LineSegment(1, 2, 0.1, 0.1)]
    mk = lambda lines, n=2, ders=(1,): FeederModel(  # noqa: E731
        n, 1.0, tuple(lines), ders, np.zeros(len(ders)), np.zeros(len(ders)), np.zeros(n), np.zeros(n))
    assert validate_radial(mk(ok)) == []
    kinds = lambda m: {v.kind for v in validate_radial(m)}  # noqa: E731
    assert "cycle" in kinds(mk(ok + [LineSegment(0, 2, 0.1, 0.1)]))
    assert "duplicate_parent" in kinds(mk(ok + [LineSegment(0, 2, 0.1, 0.1)]))
    assert "disconnected" in kinds(mk(ok[:1]))
    assert "bad_der" in kinds(mk(ok, ders=(5,)))
    assert "bad_line" in kinds(mk([LineSegment(0, 1, -1, 0.1), ok[1]]))
    with pytest.raises(FeederError):
        mk(ok[:1]).topology


def test_path_sets(ieee33):
    paths = downstream_path_sets(ieee33)
    assert paths[0] == frozenset({(0, 1)})
    assert len(paths[16]) == 17  # bus 17 sits 17 lines from the slack
    assert paths[17] == frozenset({(0, 1), (1, 18)})
    assert (1, 18) in paths[20]


def test_feeder_file_round_trip(tmp_path, ieee33):
    path = tmp_path / "f.txt"
    write_feeder(ieee33, path)
    again = read_feeder(path)
    assert again.fingerprint() == ieee33.fingerprint()
    assert path.read_text() == ieee33_data_text().replace("# ieee33", "# " + ieee33.name)


def test_parse_errors():
    with pytest.raises(FeederError):
        parse_feeder("0 1 0.1 0.1 0 0\n")
    with pytest.raises(FeederError):
        parse_feeder("buses=1 v0=1\n0 1 0.1\n")
    with pytest.raises(FeederError):
        parse_feeder("buses=1 v0=1\n0 1 0.1 0.1 -1 0\n")


def test_der_subset():
    m = build_ieee33(der_nodes=(6, 18, 33 - 1))
    assert list(m.der_index) == [5, 17, 31]
    assert np.all(m.q_capability == 0.6)

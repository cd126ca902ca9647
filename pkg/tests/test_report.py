import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from voltvar.report import (
    compute_stats,
    emit_plot_data,
    pct,
    read_profiles_csv,
    render_table,
    table_rows,
)


def test_stats_hand_values():
    V = np.array([[1.0, 1.02, 0.96], [1.06, 0.995, 1.0]])
    st_ = compute_stats(V, (0.01, 0.03, 0.05))
    assert st_.avg_abs_deviation == pytest.approx(100 * 0.125 / 6)
    assert st_.exceed_rates[0.01] == pytest.approx(100 * 3 / 6)
    assert st_.exceed_rates[0.03] == pytest.approx(100 * 2 / 6)
    assert st_.exceed_rates[0.05] == pytest.approx(100 * 1 / 6)


def test_threshold_is_strict():
    # exactly representable deviation of 0.0625 sits on the threshold and is not counted
    st_ = compute_stats(np.array([1.0625, 1.0]), (0.0625,))
    assert st_.exceed_rates[0.0625] == 0.0


@settings(max_examples=100, deadline=None)
@given(arrays(float, (4, 5), elements=st.floats(0.8, 1.2)))
def test_rates_nonincreasing_in_threshold(V):
    st_ = compute_stats(V, (0.01, 0.03, 0.05, 0.07))
    rates = [st_.exceed_rates[t] for t in (0.01, 0.03, 0.05, 0.07)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert 0 <= st_.avg_abs_deviation <= 20 + 1e-9


def test_percent_formatting_rounds_half_even():
    assert pct(0.125) == "0.12%"
    assert pct(0.135) == "0.14%"  # binary 0.135 is just above the half
    assert pct(12.0) == "12.00%"


def test_table_layouts():
    s = compute_stats(np.array([1.0, 1.06]), (0.05, 0.07))
    header, rows = table_rows([("Rule", s)], "table3")
    assert header == ["Model", "Avg", ">5%", ">7%"]
    assert rows == [["Rule", "3.00%", "50.00%", "0.00%"]]
    csv_text, text = render_table([("Rule", s)], "table3")
    assert csv_text.splitlines()[1] == "Rule,3.00%,50.00%,0.00%"
    assert text.splitlines()[0].startswith("Model")
    with pytest.raises(ValueError):
        table_rows([])


def test_profiles_round_trip_and_deterministic_svg(tmp_path):
    rng = np.random.default_rng(0)
    prof = {"A": rng.uniform(0.9, 1.0, (3, 5)), "B": rng.uniform(0.95, 1.05, (3, 5))}
    paths = emit_plot_data(prof, tmp_path / "p")
    back = read_profiles_csv(paths[0])
    for k in prof:
        assert np.array_equal(back[k][:, 1:], prof[k]) and np.all(back[k][:, 0] == 1.0)
    again = emit_plot_data(prof, tmp_path / "q")
    assert paths[1].read_bytes() == again[1].read_bytes()
    assert paths[1].read_bytes().startswith(b"<?xml")


def test_unwritable_destination(tmp_path):
    with pytest.raises(OSError):
        emit_plot_data({"A": np.ones((1, 2))}, tmp_path / "missing" / "p")

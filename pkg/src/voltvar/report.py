"""Voltage-deviation statistics, comparison tables and profile figures."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

import numpy as np

TABLE2_THRESHOLDS = (0.01, 0.03, 0.05)
TABLE3_THRESHOLDS = (0.05, 0.07)
LAYOUTS = {"table2": TABLE2_THRESHOLDS, "table3": TABLE3_THRESHOLDS}

STYLE = {
    "figure.figsize": (7.0, 4.0),
    "font.family": "DejaVu Sans",
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "lines.markersize": 3,
    "svg.hashsalt": "voltvar",
    "svg.fonttype": "none",
    "path.simplify": False,
}


@dataclass(frozen=True)
class DeviationStats:
    avg_abs_deviation: float  # percent
    exceed_rates: dict  # threshold (fraction) -> percent of entries strictly above it
    n_entries: int


def compute_stats(voltages, thresholds=TABLE2_THRESHOLDS) -> DeviationStats:
    dev = np.abs(np.asarray(voltages, dtype=float).ravel() - 1.0)
    if dev.size == 0:
        raise ValueError("empty voltage matrix")
    rates = {float(t): 100.0 * np.count_nonzero(dev > t) / dev.size for t in sorted(thresholds)}
    return DeviationStats(100.0 * float(np.mean(dev)), rates, int(dev.size))


def pct(x: float) -> str:
    return str(Decimal(float(x)).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN)) + "%"


def _thr_label(t: float) -> str:
    return f">{Decimal(str(round(100 * t, 6))).normalize()}%"


def table_rows(methods, layout="table2"):
    """Header and string rows for ``[(name, DeviationStats), ...]``."""
    if not methods:
        raise ValueError("need at least one method")
    thresholds = LAYOUTS[layout] if isinstance(layout, str) else tuple(layout)
    header = ["Model", "Avg"] + [_thr_label(t) for t in thresholds]
    rows = []
    for name, st in methods:
        rows.append([name, pct(st.avg_abs_deviation)] + [pct(st.exceed_rates[float(t)]) for t in thresholds])
    return header, rows


def mse_rows(methods):
    header = ["Model", "Voltage MSE (test)"]
    return header, [[name, f"{mse:.3e}"] for name, mse in methods]


def render_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def render_text(header, rows) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    fmt = lambda r: "  ".join(  # noqa: E731
        str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths))
    )
    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule, *map(fmt, rows)]) + "\n"


def render_table(methods, layout="table2"):
    """Return ``(csv_text, aligned_text)`` for a deviation table."""
    header, rows = table_rows(methods, layout)
    return render_csv(header, rows), render_text(header, rows)


def write_table(path_stem, header, rows) -> list[Path]:
    stem = Path(path_stem)
    out = [stem.with_suffix(".csv"), stem.with_suffix(".txt")]
    out[0].write_text(render_csv(header, rows))
    out[1].write_text(render_text(header, rows))
    return out


# ---------------------------------------------------------------------------
# voltage profiles


def write_profiles_csv(profiles: dict, path, v0=1.0) -> Path:
    """Long-format CSV ``method,scenario,bus,v`` with the slack as bus 0."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "scenario", "bus", "v"])
        for name, V in profiles.items():
            V = np.atleast_2d(np.asarray(V, dtype=float))
            for s, row in enumerate(V):
                for b, v in enumerate(np.concatenate([[v0], row])):
                    w.writerow([name, s, b, format(float(v), ".17g")])
    return path


def read_profiles_csv(path) -> dict:
    acc: dict = {}
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            acc.setdefault(rec["method"], {}).setdefault(int(rec["scenario"]), {})[int(rec["bus"])] = float(rec["v"])
    out = {}
    for name, scen in acc.items():
        out[name] = np.array([[scen[s][b] for b in sorted(scen[s])] for s in sorted(scen)])
    return out


def plot_profiles(profiles: dict, path, v0=1.0, title="Mean voltage profile", band=0.05):
    """One polyline per method: scenario-mean voltage against bus index (slack = 0)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, V in profiles.items():
            V = np.atleast_2d(np.asarray(V, dtype=float))
            if V.size == 0:
                continue
            mean = np.concatenate([[v0], V.mean(axis=0)])
            ax.plot(np.arange(mean.size), mean, marker="o", label=name)
        if profiles:
            ax.axhline(1.0, color="0.3", lw=0.8)
            for lim in (1 - band, 1 + band):
                ax.axhline(lim, color="0.5", lw=0.8, ls="--")
            ax.set_xlabel("Bus index")
            ax.set_ylabel("Voltage (p.u.)")
            ax.set_title(title)
            if any(np.size(V) for V in profiles.values()):
                ax.legend(loc="lower left", fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    return fig


def emit_plot_data(profiles: dict, path_stem, v0=1.0, title="Mean voltage profile") -> list[Path]:
    """Write ``<stem>.csv`` (all scenarios) and ``<stem>.svg`` (scenario means)."""
    import matplotlib.pyplot as plt

    stem = Path(path_stem)
    try:
        csv_path = write_profiles_csv(profiles, stem.with_suffix(".csv"), v0)
        fig = plot_profiles(profiles, stem.with_suffix(".svg"), v0, title)
    except OSError as exc:
        raise OSError(f"cannot write plot files at {stem}: {exc}") from exc
    plt.close(fig)
    return [csv_path, stem.with_suffix(".svg")]


def plot_training_curve(epochs, values, path, ylabel="Loss", logy=True):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, values)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel("Epoch")
        ax.set_ylabel(ylabel)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return Path(path)

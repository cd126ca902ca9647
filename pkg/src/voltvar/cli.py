"""Command-line pipeline: datasets, surrogates, VVO, VVC and reports.

Every command reads one run configuration (INI file, then flag overrides),
writes its outputs under ``--out`` and drops a manifest next to them.

Exit codes: 0 ok, 2 configuration, 3 data generation, 4 training, 5 control loop.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import logging
import platform
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    MalformedRow,
    PerturbSpec,
    ScenarioSet,
    gen_pf_dataset,
    gen_scenario_dataset,
    read_csv,
    split_80_20,
    write_csv,
)
from .deq import ControlLoopFailure, SingularSystem, VvcTrainConfig, oracle_closed_loop, train_vvc
from .feeder import FeederError, NonConvergence, VoltageCollapse, build_ieee33, read_feeder, solve_distflow
from .fixed_point import AndersonConfig
from .linear import build_lindistflow, fit_least_squares, load_ls, save_lindistflow, save_ls
from .milp.vvo import BnbConfig, assemble_vvo, evaluate_vvo, solve_bnb
from .neural import DivergenceDetected, PfTrainConfig, load_model, mse_eval, parse_bias_init, save_model, train_pf
from .report import (
    LAYOUTS,
    compute_stats,
    emit_plot_data,
    mse_rows,
    plot_training_curve,
    read_profiles_csv,
    table_rows,
    write_table,
)
from .rule import default_params, read_params, stability_caps, write_params

log = logging.getLogger("voltvar")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING, EXIT_CONTROL = 0, 2, 3, 4, 5

SURROGATE_LABELS = {"nn": "NN", "ls": "LS", "lindistflow": "LinDistFlow"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    # feeder
    feeder: str = "ieee33"  # builtin id or path to a feeder text file
    der_nodes: str = ""  # comma list; empty = every load bus
    qg_min: float = -0.1
    qg_max: float = 0.6
    # datasets
    pf_samples: int = 20000
    scenario_samples: int = 100
    relative_range: float = 0.10
    q_offset_lo: float = -0.8
    q_offset_hi: float = 0.2
    pf_split: str = "shuffle"
    # surrogate training
    hidden: int = 64
    pf_epochs: int = 2000
    pf_batch_size: int = 64
    pf_learning_rate: float = 1e-3
    pf_lr_decay: float = 0.01
    pf_bias_init: str = "data"  # "data" or a constant hidden bias
    # volt-var optimization
    surrogates: str = "nn,ls,lindistflow"
    bnb_gap: float = 1e-6
    bnb_max_nodes: int = 2000
    bnb_time_limit: float = float("inf")
    # volt-var control
    vvc_epochs: int = 500
    vvc_batch_size: int = 16
    vvc_learning_rate: float = 1e-3
    vvc_epsilon: float = 0.05
    vvc_use_caps: bool = True
    anderson_memory: int = 5
    anderson_tol: float = 1e-8
    anderson_max_iter: int = 100

    def surrogate_list(self) -> list[str]:
        names = [s.strip().lower() for s in self.surrogates.split(",") if s.strip()]
        bad = [s for s in names if s not in SURROGATE_LABELS]
        if bad or not names:
            raise ConfigError(f"unknown surrogate(s) {bad or names}; choose from {sorted(SURROGATE_LABELS)}")
        return names

    def fingerprint(self) -> str:
        text = "\n".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self) if f.name != "out")
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# INI section for every config key
SECTIONS = {
    "run": ("seed",),
    "feeder": ("feeder", "der_nodes", "qg_min", "qg_max"),
    "data": ("pf_samples", "scenario_samples", "relative_range", "q_offset_lo", "q_offset_hi", "pf_split"),
    "pf": ("hidden", "pf_epochs", "pf_batch_size", "pf_learning_rate", "pf_lr_decay", "pf_bias_init"),
    "vvo": ("surrogates", "bnb_gap", "bnb_max_nodes", "bnb_time_limit"),
    "vvc": ("vvc_epochs", "vvc_batch_size", "vvc_learning_rate", "vvc_epsilon", "vvc_use_caps",
            "anderson_memory", "anderson_tol", "anderson_max_iter"),
}


def _coerce(name: str, raw):
    kind = type(getattr(RunConfig(), name))
    try:
        if kind is bool:
            if isinstance(raw, bool):
                return raw
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: cannot read {raw!r} as {kind.__name__}") from exc


def load_config(path=None, overrides=None) -> RunConfig:
    """Defaults, then the INI file, then explicit overrides (``None`` values skipped)."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}] in {path}")
            for key, raw in parser.items(section):
                if key not in SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                values[key] = _coerce(key, raw)
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = _coerce(key, val)
    cfg = replace(RunConfig(), **values)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    if cfg.pf_samples < 5 or cfg.scenario_samples < 5:
        raise ConfigError("need at least 5 samples per dataset")
    if not cfg.qg_min <= 0 <= cfg.qg_max:
        raise ConfigError("reactive bounds must satisfy qg_min <= 0 <= qg_max")
    if cfg.pf_split not in ("shuffle", "ordered"):
        raise ConfigError("pf_split must be 'shuffle' or 'ordered'")
    if cfg.hidden < 1 or cfg.pf_epochs < 0 or cfg.pf_batch_size < 1 or cfg.pf_learning_rate <= 0:
        raise ConfigError("invalid surrogate training settings")
    try:
        parse_bias_init(cfg.pf_bias_init)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.vvc_epochs < 0 or cfg.vvc_batch_size < 1 or cfg.vvc_learning_rate <= 0:
        raise ConfigError("invalid VVC training settings")
    if not 0 < cfg.vvc_epsilon < 1:
        raise ConfigError("vvc_epsilon must lie in (0, 1)")
    if cfg.bnb_max_nodes < 1 or cfg.bnb_gap < 0:
        raise ConfigError("invalid branch-and-bound limits")
    cfg.surrogate_list()


def write_config(cfg: RunConfig, path) -> Path:
    parser = configparser.ConfigParser()
    for section, keys in SECTIONS.items():
        parser[section] = {k: str(getattr(cfg, k)) for k in keys}
    path = Path(path)
    with path.open("w") as fh:
        parser.write(fh)
    return path


# ---------------------------------------------------------------------------
# run directory


@dataclass
class RunPaths:
    root: Path
    data: Path = field(init=False)
    models: Path = field(init=False)
    reports: Path = field(init=False)
    logs: Path = field(init=False)

    def __post_init__(self):
        self.data = self.root / "data"
        self.models = self.root / "models"
        self.reports = self.root / "reports"
        self.logs = self.root / "logs"

    def ensure(self):
        for d in (self.data, self.models, self.reports, self.logs):
            d.mkdir(parents=True, exist_ok=True)
        return self

    @property
    def pf_csv(self):
        return self.data / "pf.csv"

    @property
    def scenario_csv(self):
        return self.data / "scenarios.csv"

    @property
    def nn(self):
        return self.models / "nn.txt"

    @property
    def ls(self):
        return self.models / "ls.txt"

    @property
    def ldf(self):
        return self.models / "lindistflow.txt"

    @property
    def rules_trained(self):
        return self.models / "rules_trained.txt"

    @property
    def rules_initial(self):
        return self.models / "rules_initial.txt"


def write_manifest(paths: RunPaths, command: str, cfg: RunConfig) -> Path:
    import matplotlib

    lines = [
        f"command={command}",
        f"config_hash={cfg.fingerprint()}",
        f"seed={cfg.seed}",
        f"voltvar={__version__}",
        f"python={platform.python_version()}",
        f"numpy={np.__version__}",
        f"matplotlib={matplotlib.__version__}",
    ]
    path = paths.root / f"manifest-{command}.txt"
    path.write_text("\n".join(lines) + "\n")
    write_config(cfg, paths.root / "config.ini")
    return path


def build_model(cfg: RunConfig):
    ders = None
    if cfg.der_nodes.strip():
        try:
            ders = tuple(int(s) for s in cfg.der_nodes.split(",") if s.strip())
        except ValueError as exc:
            raise ConfigError(f"der_nodes: {cfg.der_nodes!r} is not a comma list of buses") from exc
    try:
        if cfg.feeder == "ieee33":
            return build_ieee33(ders, cfg.qg_min, cfg.qg_max)
        path = Path(cfg.feeder)
        if not path.is_file():
            raise ConfigError(f"feeder file not found: {path}")
        return read_feeder(path, der_nodes=ders, qg_min=cfg.qg_min, qg_max=cfg.qg_max)
    except FeederError as exc:
        raise ConfigError(str(exc)) from exc


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"missing {what}: {path} (run the earlier pipeline step first)")
    return path


def load_scenarios(paths: RunPaths) -> ScenarioSet:
    return ScenarioSet.from_pf_dataset(read_csv(_require(paths.scenario_csv, "scenario dataset")))


def scenario_split(n: int):
    return split_80_20(n, "ordered")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, paths: RunPaths) -> int:
    model = build_model(cfg)
    spec = PerturbSpec(cfg.relative_range, (cfg.q_offset_lo, cfg.q_offset_hi))
    pf = gen_pf_dataset(model, cfg.pf_samples, spec, seed=cfg.seed)
    write_csv(pf, paths.pf_csv)
    sc = gen_scenario_dataset(model, cfg.scenario_samples, seed=cfg.seed + 1, relative_range=cfg.relative_range)
    write_csv(sc.as_pf_dataset(), paths.scenario_csv)
    log.info("wrote %d PF rows and %d scenarios", len(pf), len(sc))
    return EXIT_OK


def _pf_split(cfg: RunConfig, n: int):
    return split_80_20(n, cfg.pf_split, cfg.seed)


def cmd_train_pf(cfg: RunConfig, paths: RunPaths) -> int:
    model = build_model(cfg)
    ds = read_csv(_require(paths.pf_csv, "PF dataset"))
    if ds.n_buses != model.n_buses:
        raise ConfigError(f"dataset has {ds.n_buses} buses, feeder has {model.n_buses}")
    tr, _ = _pf_split(cfg, len(ds))
    conf = PfTrainConfig(hidden=cfg.hidden, learning_rate=cfg.pf_learning_rate, epochs=cfg.pf_epochs,
                         batch_size=cfg.pf_batch_size, seed=cfg.seed, lr_decay=cfg.pf_lr_decay,
                         bias_init=cfg.pf_bias_init, log_every=max(cfg.pf_epochs // 20, 1))
    res = train_pf(ds.inputs[tr], ds.outputs[tr], conf)
    save_model(res.model, paths.nn)
    save_ls(fit_least_squares(ds.inputs[tr], ds.outputs[tr]), paths.ls)
    save_lindistflow(build_lindistflow(model), paths.ldf)
    ep, loss = zip(*res.curve)
    with (paths.reports / "pf_training_curve.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "scaled_mse"])
        w.writerows([e, format(v, ".17g")] for e, v in res.curve)
    plot_training_curve(ep, loss, paths.reports / "pf_training_curve.svg", ylabel="Scaled training MSE")
    return EXIT_OK


def cmd_eval_pf(cfg: RunConfig, paths: RunPaths) -> int:
    model = build_model(cfg)
    ds = read_csv(_require(paths.pf_csv, "PF dataset"))
    _, te = _pf_split(cfg, len(ds))
    nn = load_model(_require(paths.nn, "NN checkpoint"))
    ls = load_ls(_require(paths.ls, "LS model"))
    ldf = build_lindistflow(model)
    X, Y = ds.inputs[te], ds.outputs[te]
    methods = [
        ("NN", mse_eval(nn.predict, X, Y)),
        ("LS", mse_eval(ls.predict, X, Y)),
        ("LinDistFlow", mse_eval(ldf.predict, X, Y)),
    ]
    write_table(paths.reports / "table1_pf_mse", *mse_rows(methods))
    for name, v in methods:
        log.info("%s test MSE %.3e", name, v)
    return EXIT_OK


def _surrogates(cfg, paths, model):
    out = {}
    for name in cfg.surrogate_list():
        if name == "nn":
            out[name] = load_model(_require(paths.nn, "NN checkpoint"))
        elif name == "ls":
            out[name] = load_ls(_require(paths.ls, "LS model"))
        else:
            out[name] = build_lindistflow(model)
    return out


def cmd_vvo(cfg: RunConfig, paths: RunPaths) -> int:
    model = build_model(cfg)
    sc = load_scenarios(paths)
    _, te = scenario_split(len(sc))
    test = sc.subset(te)
    bnb = BnbConfig(gap=cfg.bnb_gap, max_nodes=cfg.bnb_max_nodes, time_limit=cfg.bnb_time_limit)
    profiles = {}
    stats = []
    sol_rows, timing_rows = [], []
    for name, sur in _surrogates(cfg, paths, model).items():
        V = []
        for j, s in enumerate(test):
            sid = int(te[j])
            try:
                sol = solve_bnb(assemble_vvo(sur, model, s.net_p, s.q_c), bnb)
                if sol.q_g is None:
                    raise RuntimeError(f"status {sol.status}")
                v, _ = evaluate_vvo(model, s.net_p, s.q_c, sol)
            except (RuntimeError, ValueError, NonConvergence, VoltageCollapse) as exc:
                log.warning("%s VVO failed on scenario %d: %s", name, sid, exc)
                continue
            if sol.status != "optimal":
                log.warning("%s scenario %d stopped with gap %.3e (%s)", name, sid, sol.gap, sol.status)
            V.append(v)
            sol_rows.append([SURROGATE_LABELS[name], sid, sol.status, format(sol.objective, ".17g"),
                             format(sol.gap, ".17g"), sol.nodes, *(format(x, ".17g") for x in sol.q_g)])
            timing_rows.append([SURROGATE_LABELS[name], sid, f"{sol.wall_time:.3f}"])
        if V:
            profiles[SURROGATE_LABELS[name]] = np.array(V)
            stats.append((SURROGATE_LABELS[name], compute_stats(np.array(V), LAYOUTS["table2"])))
    base = np.array([solve_distflow(model, s.net_p, s.q_c).v for s in test])
    profiles["No correction"] = base
    stats.append(("No correction", compute_stats(base, LAYOUTS["table2"])))

    write_table(paths.reports / "table2_vvo", *table_rows(stats, "table2"))
    der = model.der_index + 1
    with (paths.reports / "vvo_solutions.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["surrogate", "scenario", "status", "objective", "gap", "nodes", *(f"qg_{b}" for b in der)])
        w.writerows(sol_rows)
    with (paths.logs / "vvo_wall_time.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["surrogate", "scenario", "seconds"])
        w.writerows(timing_rows)
    emit_plot_data(profiles, paths.reports / "vvo_profiles", title="VVO: mean test voltage profile")
    return EXIT_OK


def _vvc_setup(cfg, paths, model):
    nn = load_model(_require(paths.nn, "NN checkpoint"))
    ldf = build_lindistflow(model)
    der = model.der_index
    caps = stability_caps(ldf.X, der, cfg.vvc_epsilon).x_row_caps if cfg.vvc_use_caps else None
    anderson = AndersonConfig(memory=cfg.anderson_memory, tol=cfg.anderson_tol, max_iter=cfg.anderson_max_iter)
    return nn, der, caps, anderson


def cmd_train_vvc(cfg: RunConfig, paths: RunPaths) -> int:
    model = build_model(cfg)
    sc = load_scenarios(paths)
    tr, _ = scenario_split(len(sc))
    nn, der, caps, anderson = _vvc_setup(cfg, paths, model)
    q_hat = model.q_capability
    params0 = default_params(model.der_nodes, q_hat)
    conf = VvcTrainConfig(epochs=cfg.vvc_epochs, batch_size=cfg.vvc_batch_size,
                          learning_rate=cfg.vvc_learning_rate, seed=cfg.seed, anderson=anderson,
                          epsilon=cfg.vvc_epsilon, use_caps=cfg.vvc_use_caps)
    res = train_vvc(sc.subset(tr), nn, params0, q_hat, der, conf, caps=caps)
    write_params(res.initial, paths.rules_initial)
    write_params(res.params, paths.rules_trained)
    with (paths.reports / "vvc_training_curve.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "max_residual", "dropped"])
        w.writerows([e, format(l, ".17g"), format(r, ".17g"), d] for e, l, r, d in res.log)
    if res.log:
        plot_training_curve([r[0] for r in res.log], [r[1] for r in res.log],
                            paths.reports / "vvc_training_curve.svg", ylabel="Mean equilibrium loss")
    return EXIT_OK


def cmd_eval_vvc(cfg: RunConfig, paths: RunPaths) -> int:
    model = build_model(cfg)
    sc = load_scenarios(paths)
    _, te = scenario_split(len(sc))
    test = sc.subset(te)
    trained = read_params(_require(paths.rules_trained, "trained rule file"))
    initial = read_params(_require(paths.rules_initial, "initial rule file"))
    oracle_cfg = AndersonConfig(memory=cfg.anderson_memory, tol=1e-9, max_iter=max(cfg.anderson_max_iter, 200))
    profiles, stats = {}, []
    for name, params in (("DEQ-VVC (trained)", trained), ("Initial parameters", initial), ("No correction", None)):
        res = oracle_closed_loop(test, model, params, oracle_cfg)
        for j in np.flatnonzero(~res.converged):
            log.warning("%s: closed loop did not converge on scenario %d", name, int(te[j]))
        profiles[name] = res.voltages
        stats.append((name, compute_stats(res.voltages, LAYOUTS["table3"])))
    write_table(paths.reports / "table3_vvc", *table_rows(stats, "table3"))
    emit_plot_data(profiles, paths.reports / "vvc_profiles", title="VVC: mean test voltage profile")
    return EXIT_OK


def cmd_report(cfg: RunConfig, paths: RunPaths) -> int:
    """Collect every table into one summary and redraw profile figures from their CSVs."""
    parts = []
    for stem, title in (("table1_pf_mse", "Power-flow surrogate test error"),
                        ("table2_vvo", "Volt-var optimization"),
                        ("table3_vvc", "Volt-var control")):
        txt = paths.reports / f"{stem}.txt"
        if txt.is_file():
            parts.append(f"{title}\n\n{txt.read_text()}")
    if not parts:
        raise ConfigError(f"no tables found under {paths.reports}")
    (paths.reports / "summary.txt").write_text("\n".join(parts))
    for stem, title in (("vvo_profiles", "VVO: mean test voltage profile"),
                        ("vvc_profiles", "VVC: mean test voltage profile")):
        src = paths.reports / f"{stem}.csv"
        if src.is_file():
            emit_plot_data(read_profiles_csv(src), paths.reports / stem, title=title)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-pf": cmd_train_pf,
    "eval-pf": cmd_eval_pf,
    "vvo": cmd_vvo,
    "train-vvc": cmd_train_vvc,
    "eval-vvc": cmd_eval_vvc,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="voltvar", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, help="global seed (default 0)")
    ap.add_argument("--out", help="run directory (default ./run)")
    ap.add_argument("--config", help="INI run configuration")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the PF dataset and the scenario set")
    p.add_argument("--samples", type=int, dest="pf_samples")
    p.add_argument("--scenarios", type=int, dest="scenario_samples")

    p = sub.add_parser("train-pf", help="train the NN surrogate, fit LS, build LinDistFlow")
    p.add_argument("--hidden", type=int)
    p.add_argument("--epochs", type=int, dest="pf_epochs")
    p.add_argument("--batch-size", type=int, dest="pf_batch_size")
    p.add_argument("--lr", type=float, dest="pf_learning_rate")

    sub.add_parser("eval-pf", help="test-split MSE table for all surrogates")

    p = sub.add_parser("vvo", help="volt-var optimization on the test scenarios")
    p.add_argument("--surrogate", dest="surrogates", help="comma list of nn, ls, lindistflow")
    p.add_argument("--max-nodes", type=int, dest="bnb_max_nodes")
    p.add_argument("--time-limit", type=float, dest="bnb_time_limit")

    p = sub.add_parser("train-vvc", help="train droop-rule parameters on the training scenarios")
    p.add_argument("--epochs", type=int, dest="vvc_epochs")
    p.add_argument("--batch-size", type=int, dest="vvc_batch_size")
    p.add_argument("--lr", type=float, dest="vvc_learning_rate")

    sub.add_parser("eval-vvc", help="closed-loop evaluation of trained, initial and no-correction rules")
    sub.add_parser("report", help="summarize tables and redraw figures")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = load_config(args.config, overrides)
        paths = RunPaths(Path(cfg.out)).ensure()
        t0 = time.perf_counter()
        code = COMMANDS[args.command](cfg, paths)
        write_manifest(paths, args.command, cfg)
        log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
        return code
    except ConfigError as exc:
        log.error("configuration: %s", exc)
        return EXIT_CONFIG
    except (NonConvergence, VoltageCollapse, MalformedRow) as exc:
        log.error("data: %s", exc)
        return EXIT_DATA
    except DivergenceDetected as exc:
        log.error("training: %s", exc)
        return EXIT_TRAINING
    except (ControlLoopFailure, SingularSystem) as exc:
        log.error("control loop: %s", exc)
        return EXIT_CONTROL


if __name__ == "__main__":
    sys.exit(main())

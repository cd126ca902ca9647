import subprocess
import sys

import pytest

from voltvar.cli import EXIT_CONFIG, EXIT_OK, ConfigError, RunConfig, load_config, main, write_config

SMALL = """\
[data]
pf_samples = 200
scenario_samples = 10
[pf]
hidden = 4
pf_epochs = 5
[vvo]
bnb_max_nodes = 40
[vvc]
vvc_epochs = 2
vvc_batch_size = 4
"""
STEPS = ["gen-data", "train-pf", "eval-pf", "vvo", "train-vvc", "eval-vvc", "report"]


def run_pipeline(tmp_path, name):
    cfg = tmp_path / "small.ini"
    cfg.write_text(SMALL)
    out = tmp_path / name
    for step in STEPS:
        assert main(["--config", str(cfg), "--out", str(out), step]) == EXIT_OK, step
    return out


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    return run_pipeline(tmp, "a"), run_pipeline(tmp, "b")


def test_pipeline_writes_artifacts(two_runs):
    rep = two_runs[0] / "reports"
    for stem in ("table1_pf_mse", "table2_vvo", "table3_vvc"):
        assert (rep / f"{stem}.csv").is_file() and (rep / f"{stem}.txt").is_file()
    for stem in ("vvo_profiles", "vvc_profiles"):
        assert (rep / f"{stem}.svg").is_file()
    assert (rep / "summary.txt").is_file()
    assert (two_runs[0] / "manifest-vvo.txt").is_file()
    header = (rep / "table2_vvo.csv").read_text().splitlines()[0]
    assert header == "Model,Avg,>1%,>3%,>5%"


def test_reruns_are_byte_identical(two_runs):
    a, b = two_runs
    for sub in ("data", "models", "reports"):
        files = sorted(p.relative_to(a) for p in (a / sub).rglob("*") if p.is_file())
        assert files
        for rel in files:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_missing_inputs_exit_with_config_code(tmp_path):
    assert main(["--out", str(tmp_path / "empty"), "eval-pf"]) == EXIT_CONFIG
    assert main(["--out", str(tmp_path / "empty"), "report"]) == EXIT_CONFIG


def test_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[pf]\nwidth = 3\n")
    assert main(["--config", str(bad), "--out", str(tmp_path / "r"), "gen-data"]) == EXIT_CONFIG
    assert main(["--config", str(tmp_path / "nope.ini"), "gen-data"]) == EXIT_CONFIG


def test_precedence_flags_over_file_over_defaults(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[run]\nseed = 7\n[pf]\nhidden = 9\n")
    cfg = load_config(path, {"hidden": 11, "pf_epochs": None})
    assert cfg.seed == 7 and cfg.hidden == 11 and cfg.pf_epochs == RunConfig().pf_epochs


def test_config_round_trip_and_validation(tmp_path):
    cfg = load_config(None, {"seed": 3, "pf_bias_init": "0.5", "vvc_use_caps": "no"})
    write_config(cfg, tmp_path / "c.ini")
    back = load_config(tmp_path / "c.ini")
    assert back.fingerprint() == cfg.fingerprint() and back.vvc_use_caps is False
    for bad in ({"qg_min": 0.2}, {"pf_split": "random"}, {"surrogates": "nn,gp"},
                {"pf_bias_init": "zeros"}, {"hidden": "many"}):
        with pytest.raises(ConfigError):
            load_config(None, bad)


def test_console_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "voltvar.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen-data" in out.stdout

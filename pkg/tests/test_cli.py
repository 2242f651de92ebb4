import csv
import json
import subprocess
import sys

import pytest

from activesense.cli import build_parser, config_from_args, main, read_config_file
from activesense.errors import ConfigurationError
from activesense.harness import PRESETS

FAST_CONFIG = """\
# tiny sweep for tests
trials = 2
ranges_m = 35, 45
cfar_scale = 5.2   # skip calibration
bootstrap = 100
"""


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(FAST_CONFIG)
    return p


def test_read_config_file(config_file):
    cfg = read_config_file(config_file, PRESETS["desk"])
    assert cfg.trials == 2 and cfg.ranges_m == (35.0, 45.0) and cfg.cfar_scale == 5.2
    assert cfg.n_antennas == 32


@pytest.mark.parametrize("text", ["frobnicate = 3\n", "trials: 4\n", "trials = many\n", "n_rf = 12\n"])
def test_bad_config_file(tmp_path, text):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    with pytest.raises(ConfigurationError):
        read_config_file(p, PRESETS["desk"])


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        read_config_file(tmp_path / "nope.cfg", PRESETS["desk"])


def test_flags_override_file(config_file):
    args = build_parser().parse_args(["--config", str(config_file), "--trials", "7", "--strategy", "cs",
                                      "--nrf", "2", "--seed", "9", "--blocks", "1,2,4"])
    cfg = config_from_args(args)
    assert (cfg.trials, cfg.strategy, cfg.n_rf, cfg.seed) == (7, "cs", 2, 9)
    assert cfg.blocks == (1, 2, 4) and cfg.sweep == "blocks"
    adaptive = config_from_args(build_parser().parse_args(["--blocks", "adaptive"]))
    assert adaptive.blocks == () and adaptive.sweep == "range"
    assert config_from_args(build_parser().parse_args(["--preset", "paper"])).n_antennas == 64


def test_run_writes_outputs(tmp_path, config_file, capsys):
    out = tmp_path / "out"
    assert main(["--config", str(config_file), "--out", str(out), "--trace"]) == 0
    with open(out / "pd.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["sweep_value"]) for r in rows] == [35.0, 45.0]
    assert json.loads((out / "manifest.json").read_text())["seed"] == 0
    assert (out / "events.csv").exists() and (out / "field.csv").exists()
    assert "Pd=" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [["--nrf", "9"], ["--ranges", "40,abc"], ["--blocks", "two"],
                                  ["--trials", "0"]])
def test_configuration_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "configuration error" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "activesense.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "--strategy" in proc.stdout and "--preset" in proc.stdout

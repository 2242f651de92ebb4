import math
from types import SimpleNamespace

import numpy as np
import pytest

from activesense.array import Target
from activesense.detector import Detection
from activesense.errors import ConfigurationError
from activesense.harness import (PRESETS, ExperimentConfig, PdCurve, bootstrap_ci, build_setup, compute_pd,
                                 emit_outputs, make_scenario, noise_only_fields, place_targets,
                                 read_curve_csv, run_sweep, run_trials, trial_pd)

EPS = math.radians(0.5)

# a fixed OS-CFAR scale keeps these tests clear of the noise-only calibration
FAST = ExperimentConfig(trials=4, ranges_m=(30.0, 60.0), cfar_scale=5.2, bootstrap=200)


def det(angle_deg):
    return Detection(0.0, 0.0, math.radians(angle_deg), 1.0, 0j, 0)


def result(*angles):
    return SimpleNamespace(detections=[det(a) for a in angles])


# -- Pd -----------------------------------------------------------------------

def test_pd_all_found():
    truth = [Target(50.0, 0.0, math.radians(10.0))]
    assert compute_pd([result(10.2), result(9.9)], truth, EPS) == 1.0


def test_pd_none_found():
    truth = [Target(50.0, 0.0, math.radians(10.0))]
    assert compute_pd([result(), result(12.0)], truth, EPS) == 0.0


def test_pd_half_for_one_of_two():
    truth = [Target(50.0, 0.0, math.radians(-20.0)), Target(50.0, 0.0, math.radians(20.0))]
    assert compute_pd([result(20.1), result(-19.6, 30.0)], truth, EPS) == 0.5


def test_one_detection_matches_one_target():
    truth = [Target(50.0, 0.0, math.radians(5.0)), Target(50.0, 0.0, math.radians(5.6))]
    assert trial_pd([det(5.3)], truth, EPS) == 0.5
    assert trial_pd([det(5.3), det(5.35)], truth, EPS) == 1.0


def test_pd_epsilon_is_inclusive():
    truth = [Target(50.0, 0.0, math.radians(10.0))]
    assert trial_pd([det(10.5)], truth, EPS) == 1.0
    assert trial_pd([det(10.5001)], truth, EPS) == 0.0


def test_pd_per_result_truth():
    truths = [[Target(50.0, 0.0, 0.0)], [Target(50.0, 0.0, math.radians(30.0))]]
    assert compute_pd([result(0.0), result(0.0)], truths, EPS) == 0.5
    with pytest.raises(ConfigurationError):
        compute_pd([], truths, EPS)


def test_pd_matches_binomial_on_mocked_detector():
    rng = np.random.default_rng(0)
    p, n = 0.3, 4000
    truth = [Target(50.0, 0.0, 0.1), Target(50.0, 0.0, -0.4)]
    results = [SimpleNamespace(detections=[det(math.degrees(t.angle_rad)) for t in truth if rng.uniform() < p])
               for _ in range(n)]
    sd = math.sqrt(p * (1 - p) / (2 * n))
    assert abs(compute_pd(results, truth, EPS) - p) < 4 * sd


def test_bootstrap_ci():
    rng = np.random.default_rng(1)
    values = rng.uniform(size=200) < 0.4
    lo, hi = bootstrap_ci(values, rng, 2000)
    m = values.mean()
    assert 0 <= lo <= m <= hi <= 1
    # roughly the binomial normal interval
    half = 1.96 * math.sqrt(m * (1 - m) / 200)
    assert hi - lo == pytest.approx(2 * half, rel=0.2)
    assert bootstrap_ci(np.ones(10), rng) == (1.0, 1.0)
    assert all(math.isnan(v) for v in bootstrap_ci([], rng))


# -- configuration ------------------------------------------------------------

@pytest.mark.parametrize("changes", [
    dict(trials=0), dict(strategy="greedy"), dict(n_rf=9), dict(ranges_m=()), dict(ranges_m=(-5.0,)),
    dict(pfa=1.5), dict(placement="triple"), dict(fov_deg=(10.0, -10.0)), dict(blocks=(0,)),
    dict(epsilon_deg=0.0), dict(sweep="snr"),
])
def test_bad_config(changes):
    with pytest.raises(ConfigurationError):
        ExperimentConfig().replace(**changes)


def test_presets():
    desk, paper = PRESETS["desk"], PRESETS["paper"]
    assert desk.frame.n_doppler == 16 and desk.n_antennas == 32
    assert paper.frame.n_doppler == 64 and paper.n_antennas == 64 and paper.trials == 200
    assert desk.frame.bandwidth_hz == paper.frame.bandwidth_hz == 150e6
    assert desk.noise.variance_w == pytest.approx(5.99e-13, rel=1e-3)


def test_place_targets_pair():
    cfg = ExperimentConfig(placement="pair")
    rng = np.random.default_rng(2)
    for _ in range(50):
        a, b = place_targets(cfg, 40.0, rng, 9.6)
        assert a.range_m == b.range_m == 40.0 and a.radial_speed_mps == b.radial_speed_mps
        assert math.degrees(b.angle_rad - a.angle_rad) >= 9.6
        assert -48 <= math.degrees(a.angle_rad) and math.degrees(b.angle_rad) <= 48


def test_scenarios_are_seeded():
    cfg = ExperimentConfig(placement="pair")
    assert make_scenario(cfg, 40.0, 3, 9.6) == make_scenario(cfg, 40.0, 3, 9.6)
    assert make_scenario(cfg, 40.0, 3, 9.6) != make_scenario(cfg, 40.0, 4, 9.6)
    assert make_scenario(cfg, 40.0, 3, 9.6) != make_scenario(cfg.replace(seed=1), 40.0, 3, 9.6)


def test_noise_only_fields():
    setup = build_setup(FAST)
    fields = list(noise_only_fields(setup, 3, (1, 2), seed=4))
    assert len(fields) == 3 and fields[0].shape == (3, 32, 96)
    assert np.all(fields[0] >= 0)
    # mean of the noise-only metric is the noise variance
    assert np.mean(fields[0]) == pytest.approx(setup.noise.variance_w, rel=0.1)


def test_calibrated_scale_is_reproducible():
    cfg = FAST.replace(cfar_scale=None, calibration_fields=4)
    a = build_setup(cfg).cfar_scale
    assert a > 1.0
    assert build_setup(cfg.replace(trials=9, strategy="cs")).cfar_scale == a


# -- sweeps and outputs -------------------------------------------------------

def test_sweep_is_deterministic(tmp_path):
    a = run_sweep(FAST, workers=1)
    b = run_sweep(FAST, workers=1)
    emit_outputs(a, tmp_path / "a", config=FAST)
    emit_outputs(b, tmp_path / "b", config=FAST)
    for name in ("pd.csv", "pd.dat", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a.sweep_values == [30.0, 60.0] and a.trials == [4, 4]
    for pd, lo, hi in zip(a.pd, a.ci_lo, a.ci_hi):
        assert 0 <= lo <= pd <= hi <= 1


def test_worker_count_does_not_change_results():
    one = run_trials(FAST, 40.0, (2, 4), workers=1)
    two = run_trials(FAST, 40.0, (2, 4), workers=2)
    assert one == two


def test_blocks_sweep():
    cfg = FAST.replace(sweep="blocks", blocks=(1, 3), ranges_m=(40.0,), trials=3)
    curve = run_sweep(cfg, workers=1)
    assert curve.sweep_name == "blocks" and curve.sweep_values == [1.0, 3.0]


def test_adaptive_sweep_point():
    curve = run_sweep(FAST.replace(blocks=(), ranges_m=(40.0,), trials=2), workers=1)
    assert len(curve) == 1


def test_outputs_round_trip(tmp_path):
    curve = PdCurve([40.0, 50.0], [0.75, 0.5], [0.6, 0.3], [0.9, 0.7], [200, 200])
    paths = emit_outputs(curve, tmp_path, config=ExperimentConfig(seed=77))
    assert {p.name for p in paths} == {"pd.csv", "pd.dat", "manifest.json"}
    back = read_curve_csv(tmp_path / "pd.csv")
    assert back.sweep_values == curve.sweep_values and back.pd == curve.pd and back.trials == curve.trials
    dat = np.loadtxt(tmp_path / "pd.dat")
    np.testing.assert_allclose(dat[:, 1], curve.pd)
    import json
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 77 and manifest["config"]["seed"] == 77


def test_empty_curve_writes_header_only(tmp_path):
    emit_outputs(PdCurve([], [], [], [], []), tmp_path, formats=("csv",))
    assert (tmp_path / "pd.csv").read_text().strip() == "sweep_value,pd,ci_lo,ci_hi,trials"


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_outputs(PdCurve([], [], [], [], []), blocker / "sub")


@pytest.mark.slow
def test_more_rf_chains_do_not_hurt():
    cfg = ExperimentConfig(trials=120, ranges_m=(50.0,), blocks=(4,), cfar_scale=5.2)
    pd = {}
    for n_rf in (2, 4):
        curve = run_sweep(cfg.replace(n_rf=n_rf), workers=1)
        pd[n_rf] = (curve.pd[0], curve.ci_lo[0], curve.ci_hi[0])
    # fewer chains scan fewer sectors per block; at B=4 the gap is well outside the intervals
    assert pd[4][0] >= pd[2][0]
    assert pd[4][1] > pd[2][2]

"""Monte Carlo driver: experiment configuration, Pd statistics and output files.

Trial ``t`` of a run seeded with ``s`` draws all of its randomness from
``numpy.random.SeedSequence([s, t])`` (see :meth:`Scenario.streams`), so
results do not depend on how trials are spread over worker processes.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .array import ArrayConfig, NoiseModel, Target, dbm_to_w
from .codebook import Codebook, build_codebook, build_shift_table, tx_beam
from .detector import (HypothesisGrid, block_terms, calibrate_os_cfar_scale, metric_from_terms,
                       uniform_angle_grid)
from .errors import ConfigurationError
from .otfs import OtfsFrame, generate_symbols, synthesize_rx_block
from .strategy import AcquisitionResult, AcquisitionSetup, Scenario, Strategy, run_acquisition

log = logging.getLogger(__name__)

WORKERS_ENV = "ACTIVESENSE_WORKERS"


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that defines a sweep. Defaults are the desk-scale preset."""

    n_doppler: int = 16
    m_delay: int = 16
    subcarrier_hz: float = 150e6 / 16
    n_antennas: int = 32
    carrier_freq_hz: float = 30e9
    n_rf: int = 4
    q_count: int = 8
    fov_deg: tuple[float, float] = (-48.0, 48.0)
    strategy: str = "gs"
    placement: str = "single"
    sweep: str = "range"
    ranges_m: tuple[float, ...] = (40.0, 50.0, 60.0, 70.0, 80.0)
    blocks: tuple[int, ...] = (6,)
    b_max: int = 12
    trials: int = 50
    pfa: float = 1e-3
    l_max: int = 3
    epsilon_deg: float = 0.5
    seed: int = 0
    angle_count: int = 96
    delay_bins: int = 32
    doppler_bins: tuple[int, ...] = (-1, 0, 1)
    tx_power_dbm: float = 24.0
    noise_psd_w_per_hz: float = 2e-21
    noise_figure_db: float = 3.0
    rcs_m2: float = 1.0
    max_speed_mps: float = 20.0
    cfar_window: tuple[int, int, int] = (2, 4, 8)
    cfar_guard: tuple[int, int, int] = (1, 1, 3)
    cfar_rank: float = 0.75
    cfar_scale: float | None = None
    calibration_fields: int = 30
    bootstrap: int = 2000

    def __post_init__(self):
        problems = []
        if self.trials < 1:
            problems.append("trials must be >= 1")
        if not self.epsilon_deg > 0:
            problems.append("epsilon_deg must be positive")
        if not 0 < self.pfa < 1:
            problems.append("pfa must lie in (0, 1)")
        if self.strategy not in {s.value for s in Strategy}:
            problems.append(f"unknown strategy {self.strategy!r}")
        if self.placement not in ("single", "pair"):
            problems.append(f"unknown placement {self.placement!r}")
        if self.sweep not in ("range", "blocks"):
            problems.append(f"unknown sweep {self.sweep!r}")
        if not 1 <= self.n_rf <= self.q_count:
            problems.append(f"n_rf={self.n_rf} must lie in [1, Q={self.q_count}]")
        if not self.ranges_m or any(r <= 0 for r in self.ranges_m):
            problems.append("ranges_m must be nonempty and positive")
        if any(b < 1 for b in self.blocks):
            problems.append("blocks must be positive")
        if self.fov_deg[0] >= self.fov_deg[1] or not -90 <= self.fov_deg[0] < self.fov_deg[1] <= 90:
            problems.append(f"invalid FoV {self.fov_deg}")
        if problems:
            raise ConfigurationError("; ".join(problems))

    @property
    def frame(self) -> OtfsFrame:
        return OtfsFrame(self.n_doppler, self.m_delay, self.subcarrier_hz)

    @property
    def array(self) -> ArrayConfig:
        return ArrayConfig(self.n_antennas, self.carrier_freq_hz)

    @property
    def noise(self) -> NoiseModel:
        return NoiseModel(self.noise_psd_w_per_hz, self.noise_figure_db, self.frame.bandwidth_hz)

    @property
    def sweep_values(self) -> tuple[float, ...]:
        return tuple(self.ranges_m) if self.sweep == "range" else tuple(float(b) for b in self.blocks)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


PRESETS = {
    "desk": ExperimentConfig(),
    "paper": ExperimentConfig(n_doppler=64, m_delay=64, subcarrier_hz=150e6 / 64, n_antennas=64,
                              q_count=10, delay_bins=64, trials=200),
}


@dataclass
class PdCurve:
    sweep_values: list[float]
    pd: list[float]
    ci_lo: list[float]
    ci_hi: list[float]
    trials: list[int]
    sweep_name: str = "range_m"

    def __len__(self) -> int:
        return len(self.sweep_values)


# -- setup --------------------------------------------------------------------

@functools.lru_cache(maxsize=8)
def _codebook_parts(n_antennas: int, fov_deg: tuple[float, float], q_count: int, l_max: int):
    book = build_codebook(n_antennas, fov_deg, q_count)
    return book, tx_beam(n_antennas, fov_deg), build_shift_table(book, l_max)


def _base_setup(config: ExperimentConfig, cfar_scale: float) -> AcquisitionSetup:
    book, f, table = _codebook_parts(config.n_antennas, tuple(config.fov_deg), config.q_count, config.l_max)
    return AcquisitionSetup(
        frame=config.frame, array=config.array, codebook=book, tx_beam=f, shift_table=table,
        angle_axis=uniform_angle_grid(config.fov_deg, config.angle_count),
        doppler_bins=tuple(config.doppler_bins), delay_bins=config.delay_bins, n_rf=config.n_rf,
        l_max=config.l_max, pfa_block=config.pfa, b_max=config.b_max,
        tx_power_w=dbm_to_w(config.tx_power_dbm), noise=config.noise,
        cfar_window=tuple(config.cfar_window), cfar_guard=tuple(config.cfar_guard),
        cfar_rank=config.cfar_rank, cfar_scale=cfar_scale)


def noise_only_fields(setup: AcquisitionSetup, count: int, blocks: Sequence[int], seed: int = 12345):
    """Integrated metric fields of noise-only CPIs with randomly drawn beams.

    Field ``i`` integrates ``blocks[i % len(blocks)]`` blocks.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCFA]))
    grid = setup.grid(0)
    book = setup.codebook
    for i in range(count):
        num = np.zeros(grid.shape, dtype=complex)
        energy = np.zeros(grid.shape[2])
        for b in range(blocks[i % len(blocks)]):
            picks = rng.choice(book.q_count, setup.n_rf, replace=False)
            U = book.matrix[:, picks]
            x = generate_symbols(setup.frame, rng)
            obs = synthesize_rx_block([], U, setup.tx_beam, x, setup.frame, setup.noise, rng, block_index=b)
            n_b, e_b = block_terms(obs, setup.tx_beam, setup.frame, grid)
            num += n_b
            energy += e_b
        yield metric_from_terms(num, energy)


@functools.lru_cache(maxsize=16)
def _calibrated_scale(config: ExperimentConfig) -> float:
    setup = _base_setup(config, 1.0)
    blocks = tuple(config.blocks) if config.blocks else (config.b_max,)
    fields = noise_only_fields(setup, config.calibration_fields, blocks, config.seed)
    scale = calibrate_os_cfar_scale(fields, config.pfa, config.cfar_window, config.cfar_guard, config.cfar_rank)
    log.info("OS-CFAR scale %.4g calibrated on %d noise-only fields for pfa=%g",
             scale, config.calibration_fields, config.pfa)
    return scale


def build_setup(config: ExperimentConfig, blocks: int | None = None,
                checkpoints: Sequence[int] = ()) -> AcquisitionSetup:
    """Trial-independent acquisition setup; the OS-CFAR scale is calibrated once per config."""
    scale = config.cfar_scale
    if scale is None:
        # the calibration only depends on what shapes the noise field
        scale = _calibrated_scale(config.replace(strategy="gs", placement="single", sweep="range",
                                                 ranges_m=(1.0,), trials=1, bootstrap=1))
    base = _base_setup(config, scale)
    return dataclasses.replace(base, blocks=blocks, checkpoints=tuple(checkpoints))


# -- scenarios and Pd ---------------------------------------------------------

def place_targets(config: ExperimentConfig, range_m: float, rng: np.random.Generator,
                  delta_deg: float) -> tuple[Target, ...]:
    """Random angles in the FoV; ``pair`` places two targets at one range at least Delta apart."""
    lo, hi = config.fov_deg
    speed = float(rng.uniform(-config.max_speed_mps, config.max_speed_mps))
    if config.placement == "single":
        return (Target(range_m, speed, math.radians(rng.uniform(lo, hi)), config.rcs_m2),)
    while True:
        a, b = rng.uniform(lo, hi, size=2)
        if abs(a - b) >= delta_deg:
            break
    return tuple(Target(range_m, speed, math.radians(v), config.rcs_m2) for v in sorted((a, b)))


def make_scenario(config: ExperimentConfig, range_m: float, trial: int, delta_deg: float) -> Scenario:
    rng = Scenario((), config.seed, trial).streams()["placement"]
    return Scenario(place_targets(config, range_m, rng, delta_deg), config.seed, trial)


def _match_count(detected_angles, true_angles, eps: float) -> int:
    pairs = sorted((abs(d - t), i, j) for i, t in enumerate(true_angles) for j, d in enumerate(detected_angles))
    used_t, used_d = set(), set()
    for dist, i, j in pairs:
        if dist > eps:
            break
        if i not in used_t and j not in used_d:
            used_t.add(i)
            used_d.add(j)
    return len(used_t)


def trial_pd(detections, truth: Sequence[Target], epsilon_rad: float) -> float:
    """Fraction of targets matched by a distinct detection within ``epsilon_rad`` (greedy nearest first)."""
    if not truth:
        return float("nan")
    angles = [d.angle_rad for d in detections]
    # a hair of slack so that a detection exactly epsilon away still counts
    return _match_count(angles, [t.angle_rad for t in truth], epsilon_rad * (1 + 1e-12)) / len(truth)


def compute_pd(results: Sequence[AcquisitionResult], truth, epsilon: float) -> float:
    """Pd averaged over targets, then over trials. ``epsilon`` is in radians.

    ``truth`` is one target list shared by all results or one list per result.
    """
    if not results:
        raise ConfigurationError("compute_pd needs at least one result")
    truths = [truth] * len(results) if truth and isinstance(truth[0], Target) else list(truth)
    return float(np.mean([trial_pd(r.detections, t, epsilon) for r, t in zip(results, truths)]))


def bootstrap_ci(values, rng: np.random.Generator, n_boot: int = 2000, level: float = 0.95) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    means = v[rng.integers(0, v.size, size=(n_boot, v.size))].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    m = v.mean()
    return float(min(lo, m)), float(max(hi, m))


# -- trials -------------------------------------------------------------------

@dataclass(frozen=True)
class TrialOutcome:
    trial: int
    range_m: float
    pd: dict[int, float]
    blocks_used: int
    complete: bool
    detections: int


def _run_trial(args) -> TrialOutcome:
    config, strategy, range_m, trial, blocks_list = args
    setup = _trial_setup(config, tuple(blocks_list))
    scenario = make_scenario(config, range_m, trial, setup.codebook.delta_deg)
    result = run_acquisition(scenario, strategy, setup)
    eps = math.radians(config.epsilon_deg)
    if blocks_list:
        pd = {b: trial_pd(result.checkpoints[b], scenario.targets, eps) for b in blocks_list}
    else:
        pd = {0: trial_pd(result.detections, scenario.targets, eps)}
    return TrialOutcome(trial, range_m, pd, result.blocks_used, result.complete, len(result.detections))


@functools.lru_cache(maxsize=16)
def _trial_setup(config: ExperimentConfig, blocks_list: tuple[int, ...]) -> AcquisitionSetup:
    if blocks_list:
        return build_setup(config, max(blocks_list), blocks_list)
    return build_setup(config, None)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigurationError(f"{WORKERS_ENV}={raw!r} is not an integer") from None


def run_trials(config: ExperimentConfig, range_m: float, blocks_list: Sequence[int] = (),
               strategy: str | None = None, workers: int | None = None) -> list[TrialOutcome]:
    """All trials at one range. With ``blocks_list`` each trial runs max(blocks_list)
    blocks and is scored at every listed B; an empty list runs the adaptive stopping rule.
    """
    strategy = strategy or config.strategy
    jobs = [(config, strategy, float(range_m), t, tuple(blocks_list)) for t in range(config.trials)]
    workers = worker_count() if workers is None else workers
    build_setup(config, None)  # calibrate before forking so workers inherit the cache
    if workers <= 1:
        return [_run_trial(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_trial, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def run_sweep(config: ExperimentConfig, workers: int | None = None) -> PdCurve:
    """Pd with bootstrap CI at every sweep value; deterministic under ``config.seed``."""
    boot_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xB007]))
    values, pds, los, his, counts = [], [], [], [], []
    if config.sweep == "blocks":
        blocks = sorted(set(config.blocks))
        outcomes = run_trials(config, config.ranges_m[0], blocks, workers=workers)
        for b in blocks:
            _append_point(float(b), [o.pd[b] for o in outcomes], boot_rng, config, values, pds, los, his, counts)
        return PdCurve(values, pds, los, his, counts, "blocks")
    blocks = tuple(config.blocks[:1])
    for r in config.ranges_m:
        outcomes = run_trials(config, r, blocks, workers=workers)
        key = blocks[0] if blocks else 0
        _append_point(float(r), [o.pd[key] for o in outcomes], boot_rng, config, values, pds, los, his, counts)
    return PdCurve(values, pds, los, his, counts, "range_m")


def _append_point(x, trial_values, rng, config, values, pds, los, his, counts):
    lo, hi = bootstrap_ci(trial_values, rng, config.bootstrap)
    values.append(x)
    pds.append(float(np.mean(trial_values)))
    los.append(lo)
    his.append(hi)
    counts.append(len(trial_values))


# -- outputs ------------------------------------------------------------------

CSV_HEADER = ["sweep_value", "pd", "ci_lo", "ci_hi", "trials"]


def emit_outputs(curve: PdCurve, path, formats: Sequence[str] = ("csv", "dat", "manifest"),
                 config: ExperimentConfig | None = None) -> list[Path]:
    """Write ``pd.csv``, a whitespace-separated ``pd.dat`` for gnuplot/numpy and ``manifest.json``."""
    out = Path(path)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        rows = list(zip(curve.sweep_values, curve.pd, curve.ci_lo, curve.ci_hi, curve.trials))
        if "csv" in formats:
            p = out / "pd.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(CSV_HEADER)
                for x, pd, lo, hi, n in rows:
                    w.writerow([repr(float(x)), repr(float(pd)), repr(float(lo)), repr(float(hi)), int(n)])
            written.append(p)
        if "dat" in formats:
            p = out / "pd.dat"
            lines = [f"# {curve.sweep_name} pd ci_lo ci_hi trials"]
            lines += [f"{x!r} {pd!r} {lo!r} {hi!r} {n}" for x, pd, lo, hi, n in rows]
            p.write_text("\n".join(lines) + "\n")
            written.append(p)
        if "manifest" in formats:
            p = out / "manifest.json"
            manifest = {"sweep": curve.sweep_name, "seed": None if config is None else config.seed,
                        "config": None if config is None else config.to_dict(),
                        "seeding": "trial t uses numpy SeedSequence([seed, t])"}
            p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
            written.append(p)
    except OSError as exc:
        raise OSError(f"cannot write outputs under {out}: {exc}") from exc
    return written


def read_curve_csv(path) -> PdCurve:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return PdCurve([float(r["sweep_value"]) for r in rows], [float(r["pd"]) for r in rows],
                   [float(r["ci_lo"]) for r in rows], [float(r["ci_hi"]) for r in rows],
                   [int(r["trials"]) for r in rows])
